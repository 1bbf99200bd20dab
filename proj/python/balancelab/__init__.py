"""Multimodal imbalance benchmark: synthetic data, fusion training, balancing methods and metrics."""

from balancelab._core import (  # noqa: F401
    ContractError,
    Dataset,
    DispatchError,
    DivergenceError,
    Error,
    ExperimentConfig,
    FormatError,
    InvalidArgument,
    NumericError,
    ParseError,
    RunReport,
    ShapeError,
    SyntheticSpec,
    __version__,
    compare_table,
    dataset_from_text,
    generate,
    grad_modulation,
    imbalance,
    load_dataset,
    method_names,
    parse_config,
    parse_config_file,
    report_from_json,
    run_experiment,
    run_sweep,
    save_dataset,
    shapley_values,
)
