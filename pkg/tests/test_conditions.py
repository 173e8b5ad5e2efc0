"""Trajectory perturbation, box and sketch reprojection, condition embedding."""
import math

import pytest
import torch
from torch.testing import assert_close

from conditions import (
    BEVSketch,
    Box3D,
    ConditionEncoder,
    ConditionSet,
    EgoTrajectory,
    embed_conditions,
    perturb_trajectory,
    reproject_boxes,
    reproject_sketch,
    wrap_angle,
)
from conftest import vec
from errors import InvalidBoxError, InvalidTrajectoryError, LengthMismatchError, UnknownCategoryError
from geometry import Intrinsics, PoseSE3


def straight_trajectory(n: int = 3, yaw: float = 0.0) -> EgoTrajectory:
    return EgoTrajectory([PoseSE3.from_yaw(yaw, [2.0 * t, 0.0, 0.0]) for t in range(n)], [0.5 * t for t in range(n)])


def lane_sketch(column: int, resolution: int = 64) -> BEVSketch:
    grid = torch.zeros(2, resolution, resolution, dtype=torch.uint8)
    grid[0, :, column] = 1
    return BEVSketch(grid)


def condition_set(boxes=None, tag: str = "urban", n: int = 2) -> ConditionSet:
    traj = straight_trajectory(n)
    return ConditionSet(
        sketches=[lane_sketch(32)] * n,
        boxes=boxes if boxes is not None else [[] for _ in range(n)],
        trajectory=traj,
        tag=tag,
    )


class TestTrajectory:
    def test_timestamps_must_increase(self):
        with pytest.raises(InvalidTrajectoryError):
            EgoTrajectory([PoseSE3.identity()] * 2, [1.0, 1.0])

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatchError):
            EgoTrajectory([PoseSE3.identity()], [0.0, 1.0])

    def test_zero_offset_is_identity(self):
        traj = straight_trajectory(yaw=0.4)
        shifted = perturb_trajectory(traj, 0.0)
        for a, b in zip(traj.poses, shifted.poses):
            assert_close(a.matrix(), b.matrix(), atol=1e-15, rtol=0)

    def test_lateral_shift_without_rotation(self):
        shifted = perturb_trajectory(straight_trajectory(), 2.0)
        for t, pose in enumerate(shifted.poses):
            assert_close(pose.translation, vec(2.0 * t, 2.0, 0.0))

    def test_yawed_pose_shifts_along_rotated_axis(self):
        pose = PoseSE3.from_yaw(math.pi / 2, [1.0, 1.0, 0.0])
        shifted = perturb_trajectory(EgoTrajectory([pose], [0.0]), 2.0)
        R = torch.tensor([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]], dtype=torch.float64)
        assert_close(shifted[0].translation, vec(1.0, 1.0, 0.0) + R @ vec(0.0, 2.0, 0.0), atol=1e-12, rtol=0)
        assert_close(shifted[0].translation, vec(-1.0, 1.0, 0.0), atol=1e-12, rtol=0)
        assert_close(shifted[0].rotation, pose.rotation, atol=1e-15, rtol=0)

    def test_invertible(self):
        traj = straight_trajectory(yaw=-0.7)
        back = perturb_trajectory(perturb_trajectory(traj, 3.0), -3.0)
        for a, b in zip(traj.poses, back.poses):
            assert_close(a.translation, b.translation, atol=1e-12, rtol=0)

    def test_non_finite_offset(self):
        with pytest.raises(ValueError):
            perturb_trajectory(straight_trajectory(), float("inf"))


class TestBoxes:
    def test_corner_pixels(self):
        intr = Intrinsics(100.0, 100.0, 64.0, 64.0, 128, 128)
        box = Box3D(vec(0.0, 0.0, 5.0), vec(1.0, 1.0, 1.0), 0.0)
        (projection,) = reproject_boxes([box], intr, PoseSE3.identity())
        corners = box.corners()
        index = int(((corners - vec(0.5, 0.5, 4.5)).abs().sum(-1) < 1e-12).nonzero()[0])
        expected = 64.0 + 100.0 * 0.5 / 4.5
        assert_close(projection.corners[index], vec(expected, expected))
        assert abs(expected - 75.11) < 0.01
        assert projection.any_visible

    def test_behind_camera(self):
        intr = Intrinsics(100.0, 100.0, 64.0, 64.0, 128, 128)
        box = Box3D(vec(0.0, 0.0, -5.0), vec(1.0, 1.0, 1.0), 0.0)
        (projection,) = reproject_boxes([box], intr, PoseSE3.identity())
        assert not projection.any_visible
        assert not bool(projection.visible.any())

    def test_corners_invariant_under_full_turn(self):
        a = Box3D(vec(1.0, 2.0, 0.5), vec(4.0, 2.0, 1.5), 0.3)
        b = Box3D(vec(1.0, 2.0, 0.5), vec(4.0, 2.0, 1.5), 0.3 + 2.0 * math.pi)
        assert a.corners().shape == (8, 3)
        assert_close(a.corners(), b.corners(), atol=1e-12, rtol=0)

    def test_contains_centre(self):
        box = Box3D(vec(1.0, 2.0, 0.5), vec(4.0, 2.0, 1.5), 0.8)
        assert bool(box.contains(vec(1.0, 2.0, 0.5).unsqueeze(0))[0])
        assert not bool(box.contains(vec(10.0, 2.0, 0.5).unsqueeze(0))[0])

    def test_non_positive_size(self):
        with pytest.raises(InvalidBoxError):
            Box3D(vec(0.0, 0.0, 0.0), vec(1.0, 0.0, 1.0), 0.0)

    @pytest.mark.parametrize("yaw,expected", [(-math.pi, math.pi), (math.pi, math.pi), (2 * math.pi + 0.5, 0.5)])
    def test_wrap_angle(self, yaw, expected):
        assert abs(wrap_angle(yaw) - expected) < 1e-12


class TestSketch:
    def test_identity_change(self):
        traj = straight_trajectory()
        sketch = lane_sketch(20)
        for out in reproject_sketch(sketch, traj, traj):
            assert torch.equal(out.grid, sketch.grid)

    def test_lateral_shift_moves_columns(self):
        traj = straight_trajectory()
        sketch = lane_sketch(40)
        shifted = reproject_sketch(sketch, traj, perturb_trajectory(traj, 2.0))
        # 0.5 m cells: +2 m to the left moves the lane 4 columns toward −y
        cells = round(2.0 / sketch.cell_size)
        assert cells == 4
        for out in shifted:
            assert torch.equal(out.grid[0, :, 40 - cells], sketch.grid[0, :, 40])
            assert int(out.grid[0].sum()) == 64
            assert int(out.grid[0, :, 60:].sum()) == 0

    def test_border_is_zero_filled(self):
        traj = straight_trajectory(1)
        full = BEVSketch(torch.ones(2, 64, 64, dtype=torch.uint8))
        (out,) = reproject_sketch(full, traj, perturb_trajectory(traj, 2.0))
        assert int(out.grid[0, :, -4:].sum()) == 0
        assert int(out.grid[0, :, :-4].min()) == 1

    def test_rejects_non_binary(self):
        with pytest.raises(ValueError):
            BEVSketch(torch.full((2, 4, 4), 2, dtype=torch.uint8))


class TestConditionEncoder:
    def test_width_and_determinism(self):
        c = condition_set()
        a, b = ConditionEncoder(2, seed=4), ConditionEncoder(2, seed=4)
        vector = embed_conditions(c, a)
        assert vector.shape == (a.cond_width,)
        assert torch.equal(vector, embed_conditions(c, b))

    def test_empty_boxes_pool_to_zero(self):
        encoder = ConditionEncoder(2)
        assert torch.equal(encoder.box_features([], PoseSE3.identity()), torch.zeros(encoder.hidden, dtype=torch.float64))

    def test_box_order_does_not_matter(self):
        boxes = [
            Box3D(vec(6.0, 2.0, 0.8), vec(4.0, 1.8, 1.2), 0.0),
            Box3D(vec(12.0, -2.0, 0.8), vec(4.0, 1.8, 1.2), 0.1, "truck"),
        ]
        encoder = ConditionEncoder(2)
        forward = embed_conditions(condition_set([boxes, boxes]), encoder)
        backward = embed_conditions(condition_set([boxes[::-1], boxes[::-1]]), encoder)
        assert_close(forward, backward, atol=1e-12, rtol=0)

    def test_tags_are_distinct(self):
        encoder = ConditionEncoder(2)
        assert not torch.equal(
            embed_conditions(condition_set(tag="urban"), encoder),
            embed_conditions(condition_set(tag="highway"), encoder),
        )

    def test_unknown_tag(self):
        with pytest.raises(UnknownCategoryError):
            embed_conditions(condition_set(tag="desert"), ConditionEncoder(2))

    def test_unknown_box_class(self):
        boxes = [[Box3D(vec(6.0, 2.0, 0.8), vec(4.0, 1.8, 1.2), 0.0, "bicycle")], []]
        with pytest.raises(UnknownCategoryError):
            embed_conditions(condition_set(boxes), ConditionEncoder(2))

    def test_step_count_mismatch(self):
        with pytest.raises(LengthMismatchError):
            embed_conditions(condition_set(n=3), ConditionEncoder(2))

    def test_window(self):
        c = condition_set(n=3)
        window = c.window(1, 2)
        assert len(window.trajectory) == 2
        assert_close(window.trajectory[0].translation, vec(2.0, 0.0, 0.0))
        assert window.boxes == c.boxes[1:]
