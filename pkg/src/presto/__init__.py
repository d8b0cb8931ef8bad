"""presto: profile and rank offline/online splits of preprocessing pipelines."""

__version__ = "0.1.0"

from .core import (  # noqa: F401
    CacheMode,
    Compression,
    DType,
    ExecMode,
    ObjectiveWeights,
    OptionGrid,
    Pipeline,
    StepKind,
    StepSpec,
    Strategy,
    Tensor,
    enumerate_strategies,
    predict_storage,
    validate_pipeline,
)
from .storage import (  # noqa: F401
    BackendConfig,
    BackendKind,
    StorageBackend,
    probe_storage,
)
from .recordio import (  # noqa: F401
    read_container,
    space_saving,
    write_container,
)
from .engine import (  # noqa: F401
    CacheOutcome,
    EpochStats,
    MaterializedDataset,
    RunConfig,
    run_online,
    shuffle_stream,
)
from .workloads import (  # noqa: F401
    DatasetDescriptor,
    Layout,
    generate_synthetic,
    preset,
    synthetic_grid,
)
from .profiler import (  # noqa: F401
    Campaign,
    ProfileConfig,
    ProfileRecord,
    materialize,
    profile_campaign,
    profile_strategy,
)
from .analysis import (  # noqa: F401
    Bottleneck,
    classify_bottleneck,
    emit_report_csv,
    emit_report_json,
    normalize,
    score_and_rank,
    speedup,
    theoretical_max_throughput,
)
