from .dataset import (
    SPLITS,
    Bag,
    Dataset,
    DatasetError,
    import_openmic,
    load_dataset,
    save_dataset,
    split_validation,
)
from .npy import (
    BadMagicError,
    FortranOrderError,
    NpyFormatError,
    TruncatedPayloadError,
    UnsupportedDtypeError,
    load_npy,
    parse_npy,
    parse_npz,
    save_npy,
    write_npy,
    write_npz,
)
from .synthetic import SynthSpec, generate_synthetic
