import math

import numpy as np
import pytest

from conftest import assert_gradients, randomize_parameters
from div2x import nn
from div2x.errors import DataError
from div2x.geom import Box3D, GridSpec, rotated_iou
from div2x.pipeline import (
    CLASS_BIAS_INIT, BevEncoder, DetectionHead, DomainAdaptiveFusion, HeadOutput, PillarEncoderConfig,
    SingleAgentDetector, StudentDetector, daf_domain_attention, daf_fuse, daf_offset, daf_spatial_attention,
    daf_warp, decode_detections, encode_targets, load_model, occupancy, pillarize, save_model,
)

GRID = GridSpec((-4.0, 4.0), (-2.0, 2.0), (0.5, 0.5))
SMALL = PillarEncoderConfig(GridSpec((-1.6, 1.6), (-1.6, 1.6), (0.8, 0.8)), channels=8, stride=1)


def _random_cloud(grid: GridSpec, count: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return np.stack([rng.uniform(*grid.x_range, size=count), rng.uniform(*grid.y_range, size=count),
                     rng.uniform(-2.0, 0.5, size=count), rng.uniform(0, 1, size=count)], axis=1)


def _feature(rng, h, w, c, name=""):
    return nn.Parameter(rng.normal(size=(h, w, c)), name=name)


class TestPillarize:

    def test_single_point(self):
        pillars = pillarize(np.array([[0.3, -0.9, -1.0, 0.7]]), GRID)
        i, j = GRID.cell_of(0.3, -0.9)
        assert pillars.shape == (16, 8, 6)
        np.testing.assert_allclose(pillars[i, j], [1.0, -1.0, 0.7, 0.05, -0.15, 1.0], atol=1e-12)
        pillars[i, j] = 0
        assert not pillars.any()

    def test_means_over_cell(self):
        cloud = np.array([[0.1, 0.1, -1.0, 0.2], [0.4, 0.3, -2.0, 0.6]])
        pillars = pillarize(cloud, GRID)
        np.testing.assert_allclose(pillars[8, 4], [2.0, -1.5, 0.4, 0.0, -0.05, 1.0], atol=1e-12)

    def test_out_of_range_points_dropped(self):
        cloud = np.array([[10.0, 0.0, -1.0, 1.0], [0.0, 5.0, -1.0, 1.0], [0.0, 0.0, -9.0, 1.0],
                          [0.0, 0.0, 3.0, 1.0]])
        assert not pillarize(cloud, GRID).any()

    def test_empty_cloud(self):
        assert not pillarize(np.zeros((0, 4)), GRID).any()

    def test_occupancy_pools_stride_blocks(self):
        pillars = pillarize(np.array([[-3.9, -1.9, -1.0, 1.0], [3.9, 1.9, -1.0, 1.0]]), GRID)
        occ = occupancy(pillars, 2)
        assert occ.shape == (8, 4)
        assert occ[0, 0] == 1 and occ[7, 3] == 1 and occ.sum() == 2


class TestEncoderAndHead:
    config = PillarEncoderConfig(GRID, channels=8, stride=2)

    def test_output_shape(self):
        encoder = BevEncoder(self.config, seed=1)
        out = encoder(nn.Tensor(pillarize(_random_cloud(GRID, 200, 0), GRID)))
        assert out.shape == (8, 4, 8)
        assert np.all(out.data >= 0)

    def test_empty_cloud_gives_zero_features(self):
        encoder = BevEncoder(self.config, seed=1)
        assert not encoder(nn.Tensor(pillarize(np.zeros((0, 4)), GRID))).data.any()

    def test_receptive_field(self, f64):
        encoder = BevEncoder(self.config, seed=3)
        for r, c in [(0, 0), (7, 3), (15, 7), (10, 1)]:
            cx, cy = (GRID.x_range[0] + (r + 0.5) * 0.5, GRID.y_range[0] + (c + 0.5) * 0.5)
            pillars = pillarize(np.array([[cx, cy, -1.0, 1.0]]), GRID)
            out = np.abs(encoder(nn.Tensor(pillars)).data).sum(axis=-1)
            for i, j in zip(*np.nonzero(out)):
                assert abs(2 * i - r) <= 3 and abs(2 * j - c) <= 3

    def test_head_prior(self):
        head = DetectionHead(8)
        out = head(nn.Tensor(np.zeros((4, 4, 8))))
        np.testing.assert_allclose(nn.sigmoid(out.class_map).data, 0.01, rtol=1e-5)
        assert out.reg_map.shape == (4, 4, 8)
        assert CLASS_BIAS_INIT == pytest.approx(-math.log(99))

    def test_seeded_construction(self):
        a = SingleAgentDetector(self.config, seed=7)
        b = SingleAgentDetector(self.config, seed=7)
        for (_, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
            np.testing.assert_array_equal(p.data, q.data)


class TestDomainAdaptiveFusion:

    def test_offsets_start_at_zero(self):
        rng = np.random.default_rng(0)
        daf = DomainAdaptiveFusion(8)
        delta = daf_offset(daf, nn.Tensor(rng.normal(size=(3, 4, 8))), nn.Tensor(rng.normal(size=(3, 4, 8))))
        assert delta.shape == (3, 4, 2)
        assert not delta.data.any()

    def test_zero_offsets_leave_feature_unwarped(self, f64):
        b_i = nn.Tensor(np.random.default_rng(1).normal(size=(3, 4, 8)))
        np.testing.assert_allclose(daf_warp(b_i, nn.Tensor(np.zeros((3, 4, 2)))).data, b_i.data, atol=1e-12)

    def test_offset_head_recovers_row_misregistration(self, f64):
        rows, cols = np.meshgrid(np.arange(16), np.arange(16), indexing="ij")
        k = np.arange(8)

        def pattern(r):
            return (np.sin(2 * np.pi * r[..., None] / 12 + k * np.pi / 4)
                    + 0.3 * np.cos(2 * np.pi * cols[..., None] / 12 + k * np.pi / 3))

        b_v = nn.Tensor(pattern(rows))
        b_i = nn.Tensor(pattern(rows + 2))
        mask = np.zeros((16, 16), dtype=np.uint8)
        mask[3:-3, 3:-3] = 1
        daf = DomainAdaptiveFusion(8)
        optimizer = nn.SGD([daf.offset.bias], lr=0.1, momentum=0.0)
        for step in range(300):
            optimizer.lr = nn.cosine_lr(0.1, step, 300)
            optimizer.zero_grad()
            nn.masked_l1(daf_warp(b_i, daf_offset(daf, b_v, b_i)), b_v, mask).backward()
            optimizer.step()
        delta = daf_offset(daf, b_v, b_i).data
        error = np.linalg.norm(delta - np.array([-2.0, 0.0]), axis=-1)
        assert error.mean() < 0.5

    def test_domain_attention_is_a_distribution(self, f64):
        rng = np.random.default_rng(2)
        daf = DomainAdaptiveFusion(8, seed=2)
        b_cat = nn.Tensor(rng.normal(scale=3.0, size=(3, 4, 8, 2)))
        a_d = daf_domain_attention(daf, b_cat).data
        assert a_d.shape == (3, 4, 8, 2)
        np.testing.assert_allclose(a_d.sum(axis=-1), 1.0, atol=1e-12)
        assert np.all((a_d >= 0) & (a_d <= 1))

    def test_spatial_attention_without_convs_is_max(self, f64):
        rng = np.random.default_rng(3)
        daf = DomainAdaptiveFusion(8, seed=3)
        for conv in (daf.spatial_conv3, daf.spatial_conv5):
            conv.weight.data = np.zeros_like(conv.weight.data)
            conv.bias.data = np.zeros_like(conv.bias.data)
        b_cat = rng.normal(size=(3, 4, 8, 2))
        a_s = daf_spatial_attention(daf, nn.Tensor(b_cat)).data
        np.testing.assert_allclose(a_s, b_cat.max(axis=(2, 3)), atol=1e-12)

    def test_infra_gate_closed_ignores_infra(self, f64):
        rng = np.random.default_rng(4)
        daf = DomainAdaptiveFusion(8, seed=4)
        b_v = nn.Tensor(rng.normal(size=(3, 4, 8)))
        a_d = np.zeros((3, 4, 8, 2))
        a_d[..., 0] = 1.0
        a_s = nn.Tensor(rng.normal(size=(3, 4)))
        first = daf_fuse(daf, b_v, nn.Tensor(rng.normal(size=(3, 4, 8))), nn.Tensor(a_d), a_s)
        second = daf_fuse(daf, b_v, nn.Tensor(rng.normal(size=(3, 4, 8))), nn.Tensor(a_d), a_s)
        np.testing.assert_allclose(first.data, second.data, atol=1e-12)

    def test_output_shape(self):
        rng = np.random.default_rng(5)
        daf = DomainAdaptiveFusion(8)
        out = daf(nn.Tensor(rng.normal(size=(5, 3, 8))), nn.Tensor(rng.normal(size=(5, 3, 8))))
        assert out.shape == (5, 3, 8)

    def test_rejects_mismatched_inputs(self):
        daf = DomainAdaptiveFusion(8)
        with pytest.raises(ValueError):
            daf(nn.Tensor(np.zeros((2, 2, 8))), nn.Tensor(np.zeros((2, 3, 8))))

    def test_gradients(self, f64):
        rng = np.random.default_rng(6)
        daf = DomainAdaptiveFusion(8, seed=6)
        randomize_parameters(daf, seed=6, scale=0.2)
        b_v = _feature(rng, 4, 4, 8, "b_v")
        b_i = _feature(rng, 4, 4, 8, "b_i")
        weights = nn.Tensor(rng.normal(size=(4, 4, 8)))

        def loss():
            return nn.sum_all(nn.mul(daf(b_v, b_i), weights))

        assert_gradients(loss, [b_v, b_i] + daf.parameters(), h=1e-6, rtol=1e-3, atol=1e-6, max_entries=6)


class TestStudentDetector:

    def test_branches_share_one_encoder(self):
        student = StudentDetector(SMALL)
        names = [name for name, _ in student.named_parameters()]
        assert sum(1 for n in names if n.startswith("encoder.")) == 6
        cloud = _random_cloud(SMALL.grid, 40, 0)
        out = student(cloud, cloud)
        np.testing.assert_array_equal(out.b_v.data, out.b_i.data)

    def test_sum_fusion_without_daf(self):
        student = StudentDetector(SMALL, use_daf=False)
        assert not any(name.startswith("daf.") for name, _ in student.named_parameters())
        out = student(_random_cloud(SMALL.grid, 40, 0), _random_cloud(SMALL.grid, 40, 1))
        np.testing.assert_allclose(out.b_f.data, out.b_v.data + out.b_i.data, rtol=1e-6)

    def test_empty_infra_cloud(self):
        out = StudentDetector(SMALL)(_random_cloud(SMALL.grid, 40, 0), np.zeros((0, 4)))
        assert not out.b_i.data.any()
        assert np.all(np.isfinite(out.head.class_map.data))

    def test_gradients(self, f64):
        rng = np.random.default_rng(7)
        student = StudentDetector(SMALL, seed=7)
        randomize_parameters(student, seed=7, scale=0.15)
        vehicle, infra = _random_cloud(SMALL.grid, 30, 1), _random_cloud(SMALL.grid, 30, 2)
        w_cls = nn.Tensor(rng.normal(size=(4, 4, 1)))
        w_reg = nn.Tensor(rng.normal(size=(4, 4, 8)))

        def loss():
            head = student(vehicle, infra).head
            return nn.add(nn.sum_all(nn.mul(head.class_map, w_cls)), nn.sum_all(nn.mul(head.reg_map, w_reg)))

        assert_gradients(loss, student.parameters(), h=1e-6, rtol=1e-3, atol=1e-5, max_entries=4)


class TestCheckpoints:

    @pytest.mark.parametrize("use_daf", [True, False])
    def test_student_round_trip(self, tmp_path, use_daf):
        student = StudentDetector(SMALL, seed=3, use_daf=use_daf)
        randomize_parameters(student, seed=3)
        save_model(student, tmp_path / "student.dvck", {"role": "student"})
        loaded = load_model(tmp_path / "student.dvck")
        assert isinstance(loaded, StudentDetector) and loaded.use_daf == use_daf
        assert loaded.config == SMALL
        vehicle, infra = _random_cloud(SMALL.grid, 30, 1), _random_cloud(SMALL.grid, 30, 2)
        np.testing.assert_array_equal(loaded(vehicle, infra).head.class_map.data,
                                      student(vehicle, infra).head.class_map.data)

    def test_single_round_trip(self, tmp_path):
        model = SingleAgentDetector(SMALL, seed=4)
        save_model(model, tmp_path / "single.dvck")
        loaded = load_model(tmp_path / "single.dvck")
        cloud = _random_cloud(SMALL.grid, 30, 3)
        np.testing.assert_array_equal(loaded(cloud)[1].reg_map.data, model(cloud)[1].reg_map.data)

    def test_missing_sidecar(self, tmp_path):
        model = SingleAgentDetector(SMALL)
        save_model(model, tmp_path / "m.dvck")
        (tmp_path / "m.dvck.json").unlink()
        with pytest.raises(DataError):
            load_model(tmp_path / "m.dvck")

    def test_sidecar_mismatch(self, tmp_path):
        save_model(SingleAgentDetector(SMALL), tmp_path / "m.dvck")
        save_model(StudentDetector(SMALL), tmp_path / "other.dvck")
        (tmp_path / "m.dvck.json").write_text((tmp_path / "other.dvck.json").read_text())
        with pytest.raises(DataError):
            load_model(tmp_path / "m.dvck")


def _head_from_targets(cls: np.ndarray, reg: np.ndarray) -> HeadOutput:
    with nn.precision(np.float64):
        return HeadOutput(nn.Tensor(np.where(cls > 0, 30.0, -30.0)), nn.Tensor(reg))


class TestTargetsAndDecoding:

    def test_encode_decode_recovers_boxes(self):
        boxes = [Box3D(-2.3, -1.1, -1.0, 1.5, 0.8, 1.6, 0.3), Box3D(2.6, 1.2, -0.9, 1.4, 0.9, 1.2, -2.0)]
        targets = encode_targets(boxes, GRID)
        assert targets.positive.sum() > 2
        assert (targets.dropped, targets.merged) == (0, 0)
        detections = decode_detections(_head_from_targets(targets.cls, targets.reg), GRID)
        assert len(detections) == 2
        for det in detections:
            assert det.score == pytest.approx(1.0)
            assert max(rotated_iou(det.box, gt) for gt in boxes) == pytest.approx(1.0, abs=1e-6)

    def test_positives_cover_footprint(self):
        box = Box3D(0.3, 0.1, -1.0, 1.5, 1.2, 2.4, 0.0)
        targets = encode_targets([box], GRID)
        xs, ys = GRID.cell_centers()
        inside = box.footprint().contains(np.stack([xs.ravel(), ys.ravel()], axis=1)).reshape(GRID.shape)
        # x in [-0.9, 1.5] holds 5 centers, y in [-0.5, 0.7] holds 2
        assert inside.sum() == 10
        np.testing.assert_array_equal(targets.positive, inside.astype(np.uint8))
        np.testing.assert_array_equal(targets.cls[..., 0], targets.positive)

    def test_shared_cells_go_to_nearest_center(self):
        boxes = [Box3D(0.1, 0.1, -1, 1, 1, 1), Box3D(0.2, 0.2, -1, 1, 1, 1), Box3D(9.0, 0.0, -1, 1, 1, 1)]
        targets = encode_targets(boxes, GRID)
        assert targets.positive.sum() == 4
        assert (targets.dropped, targets.merged) == (1, 0)
        # cell (8, 4) is centered at (0.25, 0.25), nearer the second box
        np.testing.assert_allclose(targets.reg[8, 4, :2], [-0.1, -0.1], atol=1e-12)
        np.testing.assert_allclose(targets.reg[7, 3, :2], [0.7, 0.7], atol=1e-12)

    def test_center_assignment_keeps_one_cell_per_box(self):
        boxes = [Box3D(0.1, 0.1, -1, 1, 1, 1), Box3D(0.2, 0.2, -1, 1, 1, 1), Box3D(9.0, 0.0, -1, 1, 1, 1)]
        targets = encode_targets(boxes, GRID, assignment="center")
        assert targets.positive.sum() == 1
        assert (targets.dropped, targets.merged) == (1, 1)
        np.testing.assert_allclose(targets.reg[8, 4, :2], [-0.1, -0.1], atol=1e-12)
        with pytest.raises(ValueError, match="assignment"):
            encode_targets(boxes, GRID, assignment="gaussian")

    def test_box_without_cells_is_merged(self):
        boxes = [Box3D(0.1, 0.1, -1, 0.2, 0.2, 0.2), Box3D(0.12, 0.12, -1, 0.2, 0.2, 0.2)]
        targets = encode_targets(boxes, GRID)
        assert targets.positive.sum() == 1
        assert (targets.dropped, targets.merged) == (0, 1)
        np.testing.assert_allclose(targets.reg[8, 4, :2], [-0.26, -0.26], atol=1e-12)

    def test_regression_layout(self):
        box = Box3D(0.1, -0.2, -1.2, 1.5, 2.0, 4.0, math.pi / 2)
        targets = encode_targets([box], GRID)
        i, j = GRID.cell_of(0.1, -0.2)
        np.testing.assert_allclose(targets.reg[i, j], [(0.1 - 0.25) / 0.5, (-0.2 + 0.25) / 0.5, -1.2,
                                                       math.log(1.5), math.log(2.0), math.log(4.0), 1.0, 0.0],
                                   atol=1e-12)
        assert targets.positive[i - 1, j]
        np.testing.assert_allclose(targets.reg[i - 1, j, :2], [(0.1 + 0.25) / 0.5, (-0.2 + 0.25) / 0.5],
                                   atol=1e-12)

    def test_threshold_and_candidate_cap(self):
        cls = np.full(GRID.shape + (1,), -30.0)
        reg = np.zeros(GRID.shape + (8,))
        reg[..., 7] = 1.0
        for k, i in enumerate(range(0, 16, 4)):
            cls[i, 2, 0] = 1.0 + k
        with nn.precision(np.float64):
            out = HeadOutput(nn.Tensor(cls), nn.Tensor(reg))
        assert len(decode_detections(out, GRID, score_thr=0.3)) == 4
        assert len(decode_detections(out, GRID, score_thr=0.95)) == 2
        capped = decode_detections(out, GRID, score_thr=0.3, max_candidates=2)
        assert [d.score for d in capped] == pytest.approx([1 / (1 + math.exp(-4.0)), 1 / (1 + math.exp(-3.0))])

    def test_adjacent_duplicates_suppressed(self):
        cls = np.full(GRID.shape + (1,), -30.0)
        reg = np.zeros(GRID.shape + (8,))
        reg[..., 3:6] = math.log(2.0)
        reg[..., 7] = 1.0
        cls[8, 4, 0], cls[9, 4, 0] = 5.0, 4.0
        with nn.precision(np.float64):
            out = HeadOutput(nn.Tensor(cls), nn.Tensor(reg))
        detections = decode_detections(out, GRID, nms_thr=0.3)
        assert len(detections) == 1
        assert detections[0].box.x == pytest.approx(GRID.x_range[0] + 8.5 * 0.5)

    def test_nothing_above_threshold(self):
        with nn.precision(np.float64):
            out = HeadOutput(nn.Tensor(np.full(GRID.shape + (1,), -30.0)), nn.Tensor(np.zeros(GRID.shape + (8,))))
        assert decode_detections(out, GRID) == []
