"""MCI detection from facial-feature sequences of video interviews."""

__version__ = "0.1.0"

_EXPORTS = {
    "Tensor": "numerics",
    "value_and_grad": "numerics",
    "gradcheck": "numerics",
    "adam_step": "numerics",
    "PreprocessConfig": "preprocessing",
    "preprocess_video": "preprocessing",
    "PackingConfig": "temporal",
    "extract_segments": "temporal",
    "pack_sequences": "temporal",
    "structure_video": "temporal",
    "EncoderConfig": "cae",
    "train_cae": "cae",
    "encode": "cae",
    "TransformerConfig": "transformer",
    "train_transformer": "transformer",
    "ExperimentConfig": "harness",
    "run_cv": "harness",
    "run_ablations": "harness",
    "CohortSpec": "cohort",
    "generate_cohort": "cohort",
    "DataError": "utils",
    "NumericError": "utils",
}


# Lazy loading to keep CLI --help fast while maintaining public API
def __getattr__(name: str):
    """Lazy load module components to avoid heavy imports during CLI --help."""
    if name not in _EXPORTS:
        raise AttributeError(f"module '{__name__}' has no attribute '{name}'")
    from importlib import import_module

    return getattr(import_module(f".{_EXPORTS[name]}", __name__), name)


__all__ = list(_EXPORTS)
