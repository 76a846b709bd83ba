from dataclasses import dataclass

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from srmdet.evidence import (
    DetectionPolicy,
    EvidenceAdjustment,
    aspect_adjustment_for_z,
    aspect_evidence,
    build_threshold_map,
    decide,
    region_modifiers,
    region_threshold,
    size_evidence,
)
from srmdet.geometry import BoundingBox, ImageExtent
from srmdet.srm import UnknownClassError, model_from_tables

IMG = ImageExtent(100, 100)
# The hand examples below use a modifier of 0.15, so the cap is lifted above it.
WIDE = DetectionPolicy(max_cumulative_delta=0.5)


@dataclass
class Det:
    class_label: str
    box: BoundingBox


def box(*c):
    return BoundingBox(*map(float, c))


def person_dog(p_dog=0.5, z7=0.30, **kw):
    spatial = [0, 0, 0, 0, 1 - z7, 0, 0, z7, 0]
    return model_from_tables(["dog", "person"], pair_count={("person", "dog"): 10, ("dog", "person"): 10},
                             spatial={("person", "dog"): spatial},
                             cond_prob={("dog", "person"): p_dog}, **kw)


class TestAspect:
    def model(self):
        return model_from_tables(["bottle", "cup"], aspect={"bottle": (0.4, 0.1)})

    def test_bands(self):
        assert aspect_adjustment_for_z(0.0) == EvidenceAdjustment(0.02, -0.02)
        assert aspect_adjustment_for_z(1.5) == EvidenceAdjustment(0.0, 0.0)
        assert aspect_adjustment_for_z(3.5) == EvidenceAdjustment(-0.02, 0.02)
        assert aspect_adjustment_for_z(-1.0) == EvidenceAdjustment(0.02, -0.02)

    def test_alternative_against_cut(self):
        pol = DetectionPolicy(aspect_against_z=3.0)
        assert aspect_adjustment_for_z(2.5, pol) == EvidenceAdjustment(0.0, 0.0)
        assert aspect_adjustment_for_z(3.5, pol) == EvidenceAdjustment(-0.02, 0.02)

    def test_from_box(self):
        m = self.model()
        assert aspect_evidence(box(0, 0, 10, 25), "bottle", m).delta_rp == 0.02
        assert aspect_evidence(box(0, 0, 10, 10), "bottle", m).delta_rp == -0.02

    def test_zero_std_is_neutral(self):
        adj = aspect_evidence(box(0, 0, 10, 10), "cup", self.model())
        assert (adj.delta_rp, adj.delta_tp) == (0.0, 0.0)

    def test_unknown_class(self):
        with pytest.raises(UnknownClassError):
            aspect_evidence(box(0, 0, 1, 1), "zebra", self.model())


class TestSize:
    def model(self):
        # dog/person area ratio 0.25 in log space with log-std 0.2
        return person_dog(rel_size_log={("dog", "person"): (np.log(0.25), 0.2)})

    def test_no_anchors(self):
        adj = size_evidence(box(0, 0, 10, 10), "dog", [], self.model())
        assert (adj.delta_rp, adj.delta_tp) == (0.0, 0.0)

    def test_perfect_match(self):
        anchor = Det("person", box(0, 0, 20, 20))
        adj = size_evidence(box(50, 50, 60, 60), "dog", [anchor], self.model())
        assert (adj.delta_rp, adj.delta_tp) == (0.02, -0.01)

    def test_inconclusive(self):
        anchor = Det("person", box(0, 0, 20, 20))
        side = 10 * np.exp(0.5 * 2.5 * 0.2)
        adj = size_evidence(box(50, 50, 50 + side, 60), "dog", [anchor], self.model())
        assert (adj.delta_rp, adj.delta_tp) == (0.0, 0.0)

    def test_unseen_pair_is_neutral(self):
        adj = size_evidence(box(0, 0, 10, 10), "person", [Det("dog", box(50, 50, 60, 60))], self.model())
        assert (adj.delta_rp, adj.delta_tp) == (0.0, 0.0)

    def test_cumulative_clip(self):
        anchors = [Det("person", box(0, 0, 20, 20))] * 12
        adj = size_evidence(box(50, 50, 60, 60), "dog", anchors, self.model())
        assert adj.delta_rp == pytest.approx(0.10) and adj.delta_tp == pytest.approx(-0.10)
        adj3 = size_evidence(box(50, 50, 60, 60), "dog", anchors[:3], self.model())
        assert adj3.delta_rp == pytest.approx(0.06) and adj3.delta_tp == pytest.approx(-0.03)


class TestThresholdMap:
    ANCHOR = Det("person", box(40, 20, 60, 60))

    def test_empty(self):
        tmap = build_threshold_map(IMG, [], person_dog())
        assert not tmap.modifiers.any()
        assert region_threshold(tmap, box(0, 0, 50, 50), "dog") == 0.5

    def test_below_anchor_example(self):
        tmap = build_threshold_map(IMG, [self.ANCHOR], person_dog(), WIDE)
        below = box(40, 64, 60, 96)
        assert region_threshold(tmap, below, "dog") == pytest.approx(0.5 - 0.15, abs=1e-12)
        assert region_threshold(tmap, below, "person") == 0.5
        assert region_threshold(tmap, box(0, 0, 20, 20), "dog") == 0.5

    def test_straddling_region(self):
        tmap = build_threshold_map(IMG, [self.ANCHOR], person_dog(z7=0.3), WIDE)
        # Left half in Z6 (modifier 0), right half in Z7 (0.15); Z6 = Z8 = 0 so mirroring is inert.
        straddle = box(32, 68, 48, 92)
        assert region_threshold(tmap, straddle, "dog") == pytest.approx(0.5 - 0.075, abs=1e-12)

    def test_default_cap_holds_single_anchor(self):
        tmap = build_threshold_map(IMG, [self.ANCHOR], person_dog())
        assert tmap.modifiers.max() == pytest.approx(0.10)
        assert region_threshold(tmap, box(40, 64, 60, 96), "dog") == pytest.approx(0.40)

    def test_accumulation_capped(self):
        pol = DetectionPolicy(max_cumulative_delta=0.2)
        anchors = [self.ANCHOR, Det("person", box(40, 0, 60, 30))]
        tmap = build_threshold_map(IMG, anchors, person_dog(), pol)
        assert tmap.modifiers.max() == pytest.approx(0.2)

    def test_unseen_pair_adds_nothing(self):
        m = model_from_tables(["dog", "person"], cond_prob={("dog", "person"): 0.9})
        assert not build_threshold_map(IMG, [self.ANCHOR], m).modifiers.any()

    def test_mirroring_spreads_left_right(self):
        left_only = [0, 0, 0, 1.0, 0, 0, 0, 0, 0]
        m = model_from_tables(["dog", "person"], pair_count={("person", "dog"): 5},
                              spatial={("person", "dog"): left_only}, cond_prob={("dog", "person"): 0.2})
        tmap = build_threshold_map(IMG, [self.ANCHOR], m, WIDE)
        left = region_threshold(tmap, box(0, 30, 30, 50), "dog")
        right = region_threshold(tmap, box(70, 30, 100, 50), "dog")
        assert left == pytest.approx(right) == pytest.approx(0.5 - 0.1)
        raw = build_threshold_map(IMG, [self.ANCHOR], m, DetectionPolicy(max_cumulative_delta=0.5,
                                                                           mirror_spatial=False))
        assert region_threshold(raw, box(70, 30, 100, 50), "dog") == 0.5

    def test_clamped_at_floor(self):
        pol = DetectionPolicy(base_tp=0.1, max_cumulative_delta=0.9)
        tmap = build_threshold_map(IMG, [self.ANCHOR], person_dog(p_dog=1.0, z7=1.0), pol)
        assert region_threshold(tmap, box(40, 64, 60, 96), "dog") == pol.clamp_low

    @pytest.mark.parametrize("region", [(3, 7, 41, 77), (0, 0, 100, 100), (41.5, 59.5, 58.25, 88.75)])
    def test_stride_one_matches_stride_four_on_grid_aligned_maps(self, region):
        # The anchor edges fall on multiples of 4, so the coarse map is exact.
        anchors = [self.ANCHOR]
        fine = build_threshold_map(IMG, anchors, person_dog(), DetectionPolicy(map_stride=1))
        coarse = build_threshold_map(IMG, anchors, person_dog(), DetectionPolicy(map_stride=4))
        r = box(*region)
        assert region_threshold(fine, r, "dog") == pytest.approx(region_threshold(coarse, r, "dog"), abs=1e-12)

    def test_vectorised_modifiers_agree_with_scalar(self):
        tmap = build_threshold_map(IMG, [self.ANCHOR], person_dog(), WIDE)
        regions = np.array([[0, 0, 10, 10], [30, 50, 70, 90], [40, 60, 60, 100]], float)
        mods = region_modifiers(tmap, regions)
        for r, m in zip(regions, mods):
            assert 0.5 - m[0] == pytest.approx(region_threshold(tmap, box(*r), "dog"))


class TestDecide:
    ASPECT_FOR = EvidenceAdjustment(0.02, -0.02)

    def test_floor_dominates(self):
        d = decide(0.30, self.ASPECT_FOR, EvidenceAdjustment(0.1, -0.1), 0.001)
        assert not d.accept

    def test_plain_accept(self):
        assert decide(0.55, None, None, 0.5).accept

    def test_chain(self):
        d = decide(0.45, self.ASPECT_FOR, None, 0.5 - 0.15)
        assert d.accept
        assert d.region_score == pytest.approx(0.47) and d.threshold == pytest.approx(0.33)

    def test_raw_out_of_range(self):
        with pytest.raises(ValueError):
            decide(1.2, None, None, 0.5)

    @given(st.floats(0, 1), st.floats(-0.5, 0.5), st.floats(-0.5, 0.5), st.floats(0, 1))
    def test_adjusted_values_strictly_inside_unit_interval(self, raw, drp, dtp, thr):
        d = decide(raw, EvidenceAdjustment(drp, dtp), None, thr)
        assert 0 < d.region_score < 1 and 0 < d.threshold < 1
        if d.accept:
            assert raw >= 0.36

    @given(st.floats(0, 1), st.floats(0, 0.5), st.floats(0, 0.3), st.floats(0, 0.3))
    def test_monotone(self, raw, bump, mod, extra):
        thr = 0.5 - mod
        if decide(raw, None, None, thr).accept:
            assert decide(min(raw + bump, 1.0), None, None, thr).accept
            assert decide(raw, None, None, thr - extra).accept

    @given(st.floats(0, 1), st.floats(0.05, 0.95))
    def test_reduces_to_baseline_without_evidence(self, raw, base):
        pol = DetectionPolicy(base_tp=base)
        tmap = build_threshold_map(IMG, [], person_dog(), pol)
        thr = region_threshold(tmap, box(10, 10, 30, 30), "dog")
        neutral = aspect_evidence(box(10, 10, 30, 30), "dog", person_dog())
        got = decide(raw, neutral, size_evidence(box(10, 10, 30, 30), "dog", [], person_dog()), thr, pol).accept
        expected = raw >= max(0.36, pol.clamp(base))
        assert got == expected

    def test_policy_validation(self):
        with pytest.raises(ValueError):
            DetectionPolicy(base_tp=1.5)
        with pytest.raises(ValueError):
            DetectionPolicy(size_mode="cubic")
