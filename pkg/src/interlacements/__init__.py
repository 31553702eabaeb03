"""Random interlacements on Z^d: window sampler, vacant-cluster statistics,
smoothed percolation profiles and the constrained energy problem."""

from .interlacement import (
    ClusterReport,
    OccupancyGrid,
    TrajectorySoup,
    cluster_report,
    dump_soup,
    load_soup,
    occupancy_at_level,
    sample_soup,
)
from .lattice import LatticeBox, PotentialEstimate, equilibrium_sample, green_origin, never_return_estimate, origin_box
from .percolation import (
    NlfFit,
    Probe,
    SoupBatch,
    SoupConfig,
    ThetaCurve,
    coupling_audit,
    difference_quotients,
    estimate_theta_curve,
    lemma11_identity_check,
    lowest_fitted_scan,
    nlf_scan,
    run_soups,
    verify_lemma13_bound,
)
from .theta import AffineToy, SmoothedTheta, build_smoothed_theta, check_profile, fit_base
from .variational import (
    BoxDomain,
    Field,
    MinimizerResult,
    RadialBall,
    check_minimizer_props,
    dilation_check,
    el_fixed_point,
    energy_pair,
    green_convolve,
    j_curve,
    lambda_scaling_check,
    rearrange_radial,
    solve_min,
    threshold_scan,
)

__all__ = [n for n in dir() if not n.startswith("_")]
