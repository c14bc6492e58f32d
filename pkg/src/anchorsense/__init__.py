"""Multi-anchor sensing for cellular networks.

Base stations localize targets from unlabeled per-BS ranges (with data
association and ghost detection), UEs act as asynchronous anchors with
uncertain positions, and RISs act as passive anchors whose target angles
are recovered at the BS through time-varying reflection schedules.
"""

from .assoc import (
    AssociationHypothesis,
    AssociationSolution,
    DistanceProfile,
    EnumerationCapError,
    GhostPartition,
    classify_ghosts,
    enumerate_hypotheses,
    greedy_match,
    solve_association,
    solve_association_pruned,
)
from .estimation import AoaEstimate, RangeEstimate, estimate_aoas, estimate_dopplers, estimate_ranges, music_doa
from .harness import ExperimentConfig, ResultRow, emit_csv, load_config, run_example, run_montecarlo
from .ris_assist import (
    ReflectionSchedule,
    RisObservationBlock,
    RisPolarFix,
    build_temporal_snapshots,
    estimate_aoa_at_ris,
    estimate_range_to_ris,
    localize_via_ris,
    make_schedule,
    ris_assisted_localize,
    synthesize_ris_uplink,
)
from .scene import (
    SPEED_OF_LIGHT,
    BaseStation,
    MissingLosError,
    Position,
    RadioConfig,
    Ris,
    Scene,
    SceneError,
    Target,
    UserEquipment,
    load_scene,
    los_visible,
    save_scene,
    validate_scene,
)
from .trilateration import AnchorObservation, CollinearAnchorsError, LocalizationResult, trilaterate
from .ue_assist import (
    AnchorSet,
    BistaticMeasurement,
    calibrate_to_los,
    joint_ml_localize,
    measure_bistatic,
    select_ues_outlier,
    ue_assisted_localize,
)
from .waveform import CsiTensor, PathParams, synthesize_csi

__version__ = "0.1.0"
