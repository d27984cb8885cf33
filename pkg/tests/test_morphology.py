import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mycoclip.errors import ConfigError, DimensionError, ParameterError
from mycoclip.morphology import (
    StageClass,
    StageParams,
    default_stage_params,
    generate_branching,
    generate_spore,
    generate_stage,
)
from mycoclip.rng import make_rng


def brute_force_count(n, depth, fanout):
    """Count tree edges by walking the recursion literally."""

    def edges_below(level):
        if level == depth:
            return 0
        return sum(1 + edges_below(level + 1) for _ in range(fanout))

    return sum(edges_below(0) for _ in range(n))


def branching(n=2, depth=2, fanout=2, length=10.0, width=3.0, alpha=0.7, beta=0.8):
    return StageParams(n_structures=n, branch_depth=depth, branch_length=length, branch_width=width,
                       length_decay=alpha, width_decay=beta, fanout=fanout)


def test_stage_class_order():
    assert [s.label for s in StageClass] == ["spore", "hyphae", "mycelium"]
    assert StageClass.SPORE < StageClass.HYPHAE < StageClass.MYCELIUM
    assert StageClass.parse("Hyphae") is StageClass.HYPHAE
    with pytest.raises(ConfigError):
        StageClass.parse("lichen")


@pytest.mark.parametrize("n, seed", [(1, 7), (20, 3)])
def test_spore_counts(n, seed):
    g = generate_spore(StageParams(n_structures=n), seed, 64)
    assert len(g.circles) == n
    assert g.segments == []


def test_spore_centers_match_redraw():
    r = 3.0
    g = generate_spore(StageParams(n_structures=50, spore_radius=r), 11, 64)
    rng = make_rng(11)
    xs = rng.uniform(r, 64 - r, size=50)
    ys = rng.uniform(r, 64 - r, size=50)
    assert [c.center for c in g.circles] == list(zip(xs.tolist(), ys.tolist()))
    for c in g.circles:
        assert r <= c.center[0] < 64 - r and r <= c.center[1] < 64 - r


def test_spore_rejects_small_canvas_and_branching():
    with pytest.raises(DimensionError):
        generate_spore(StageParams(n_structures=1, spore_radius=5), 0, 16)
    with pytest.raises(ParameterError):
        generate_spore(branching(), 0, 64)


def test_params_validation():
    with pytest.raises(ParameterError):
        StageParams(n_structures=0)
    with pytest.raises(ParameterError):
        StageParams(n_structures=1, length_decay=1.5)
    with pytest.raises(ParameterError):
        StageParams(n_structures=1, fanout=0)
    with pytest.raises(ParameterError):
        StageParams(n_structures=1, branch_depth=2)  # zero length with branching
    with pytest.raises(ParameterError):
        StageParams(n_structures=1, overlap_fraction=1.0)


def test_branching_count_example():
    g = generate_branching(branching(n=2, depth=2, fanout=2), StageClass.HYPHAE, 0, 64)
    assert len(g.segments) == 12 == brute_force_count(2, 2, 2)


def test_branching_depth_two_length():
    g = generate_branching(branching(length=10.0, alpha=0.5), StageClass.HYPHAE, 5, 64)
    depth2 = [s for s in g.segments if s.depth == 2]
    assert depth2
    for s in depth2:
        assert s.length == pytest.approx(2.5, rel=1e-9)


def test_single_level_tree_widths():
    g = generate_branching(branching(n=1, depth=1, fanout=3, width=4.0, beta=0.75), StageClass.MYCELIUM, 2, 64)
    assert len(g.segments) == 3
    assert [s.width for s in g.segments] == [3.0, 3.0, 3.0]


def test_branching_requires_depth():
    with pytest.raises(ParameterError):
        generate_branching(StageParams(n_structures=2), StageClass.HYPHAE, 0, 64)
    with pytest.raises(ParameterError):
        generate_branching(branching(), StageClass.SPORE, 0, 64)


def test_degenerate_branch_warning():
    g = generate_branching(branching(depth=4, length=2.0, alpha=0.5), StageClass.MYCELIUM, 0, 64)
    assert any(w.startswith("degenerate-branch") for w in g.metadata["warnings"])
    g = generate_branching(branching(), StageClass.HYPHAE, 0, 64)
    assert "warnings" not in g.metadata


def test_ancestor_chain_ends_at_circle():
    g = generate_branching(branching(n=3, depth=3, fanout=2), StageClass.MYCELIUM, 9, 64)
    for seg in g.segments:
        s = seg
        while s.parent != -1:
            parent = g.segments[s.parent]
            assert parent.depth == s.depth - 1
            assert parent.end == s.start
            s = parent
        assert s.depth == 1
        assert s.start == g.circles[s.root].center


def test_stage_overlay_examples():
    table = default_stage_params()
    table[StageClass.SPORE] = StageParams(n_structures=30, overlap_fraction=0.15)
    g = generate_stage(StageClass.SPORE, table, 1, 64)
    assert g.metadata == {} and not any(c.overlay for c in g.circles)

    table[StageClass.HYPHAE] = branching(n=10, depth=2, fanout=2, length=12, width=3)
    table[StageClass.HYPHAE] = StageParams(**{**table[StageClass.HYPHAE].to_dict(), "overlap_fraction": 0.2})
    g = generate_stage(StageClass.HYPHAE, table, 1, 64)
    primary = [c for c in g.circles if not c.overlay]
    overlay = [c for c in g.circles if c.overlay]
    assert len(primary) == 10
    assert len(overlay) == math.ceil(0.2 * 10) == 2
    assert not any(s.overlay for s in g.segments)

    table[StageClass.MYCELIUM] = StageParams(n_structures=8, branch_depth=4, branch_length=16, branch_width=4,
                                             fanout=3, overlap_fraction=0.0)
    g = generate_stage(StageClass.MYCELIUM, table, 1, 64)
    assert len(g.circles) == 8
    assert len(g.segments) == 8 * (3 + 9 + 27 + 81)


def test_mycelium_overlay_uses_hyphae_generator():
    g = generate_stage(StageClass.MYCELIUM, default_stage_params(), 4, 64)
    hyphae = default_stage_params()[StageClass.HYPHAE]
    extra = [s for s in g.segments if s.overlay]
    assert g.metadata["overlay_structures"] == 1  # ceil(0.15 * 6)
    assert len(extra) == brute_force_count(1, hyphae.branch_depth, hyphae.fanout)
    for s in extra:
        assert s.length == pytest.approx(hyphae.segment_length(s.depth), rel=1e-6)


def test_stage_requires_previous_params():
    table = default_stage_params()
    del table[StageClass.HYPHAE]
    with pytest.raises(ConfigError):
        generate_stage(StageClass.MYCELIUM, table, 0, 64)
    with pytest.raises(ConfigError):
        generate_stage(StageClass.HYPHAE, table, 0, 64)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**64 - 1), stage=st.sampled_from(list(StageClass)))
def test_serialization_is_deterministic(seed, stage):
    table = default_stage_params()
    a = generate_stage(stage, table, seed, 64).serialize()
    b = generate_stage(stage, table, seed, 64).serialize()
    assert a == b
    assert a.splitlines()[0].startswith(f"G {stage.label} {seed} 64 64")


@settings(max_examples=40, deadline=None)
@given(
    n=st.integers(1, 8), depth=st.integers(1, 4), fanout=st.integers(1, 3),
    length=st.floats(1.0, 20.0), width=st.floats(0.5, 6.0),
    alpha=st.floats(0.3, 1.0), beta=st.floats(0.3, 1.0), seed=st.integers(0, 2**32),
)
def test_depth_geometry(n, depth, fanout, length, width, alpha, beta, seed):
    p = branching(n, depth, fanout, length, width, alpha, beta)
    g = generate_branching(p, StageClass.MYCELIUM, seed, 64)
    assert len(g.segments) == brute_force_count(n, depth, fanout)
    assert g.metadata.get("clamped_segments", 0) == 0
    for s in g.segments:
        assert 1 <= s.depth <= depth
        assert s.length == pytest.approx(length * alpha**s.depth, rel=1e-6)
        assert s.width == pytest.approx(width * beta**s.depth, rel=1e-6)
        for x, y in (s.start, s.end):
            assert 0 <= x <= 64 and 0 <= y <= 64


def test_long_branches_clamped_not_dropped():
    g = generate_branching(branching(n=4, depth=2, fanout=2, length=60.0, alpha=1.0), StageClass.HYPHAE, 3, 64)
    assert len(g.segments) == brute_force_count(4, 2, 2)
    for s in g.segments:
        for x, y in (s.start, s.end):
            assert 0 <= x <= 64 and 0 <= y <= 64


def test_spore_graphs_have_no_segments():
    for seed in range(10):
        assert generate_stage(StageClass.SPORE, default_stage_params(), seed, 64).segments == []


def test_mean_complexity_increases_by_stage():
    table = default_stage_params()
    means = [np.mean([len(generate_stage(s, table, seed, 64).segments) for seed in range(20)]) for s in StageClass]
    assert means[0] < means[1] < means[2]
