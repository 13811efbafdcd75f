"""頭部モデル・カメラのテスト"""
import math

import numpy as np
import pytest

from src.facemodel.landmarks import LANDMARK_NAMES, landmark_contour_map
from src.facemodel.toy_head import (
    Camera,
    FaceParams,
    ToyFaceModel,
    build_toy_model,
    camera_from_pose,
    project_points,
)


def test_build_is_deterministic():
    """同じシードなら頂点・基底が完全に一致する"""
    a = build_toy_model(7, 4, 4, level=2)
    b = build_toy_model(7, 4, 4, level=2)
    assert np.array_equal(a.base.vertices, b.base.vertices)
    assert np.array_equal(a.shape_basis, b.shape_basis)
    assert np.array_equal(a.expression_basis, b.expression_basis)
    assert a.shape_basis.shape == (len(a.base.vertices), 3, 4)
    assert a.num_landmarks == len(LANDMARK_NAMES)


def test_build_rejects_empty_basis():
    with pytest.raises(ValueError):
        build_toy_model(7, 0, 4, level=1)


def test_zero_params_give_base_mesh(face_model):
    """係数0なら基準メッシュそのもの"""
    mesh = face_model.deform(face_model.zero_params())
    assert np.array_equal(mesh.vertices, face_model.base.vertices)
    assert np.array_equal(mesh.faces, face_model.base.faces)
    assert np.array_equal(mesh.landmark_indices, face_model.base.landmark_indices)


def test_unit_expression_reads_basis_column(face_model):
    expression = np.zeros(face_model.num_expression)
    expression[2] = 1.0
    mesh = face_model.deform(FaceParams(np.zeros(face_model.num_shape), expression))
    expected = face_model.base.vertices + face_model.expression_basis[:, :, 2]
    np.testing.assert_allclose(mesh.vertices, expected, atol=1e-12)


def test_deformation_is_linear(face_model, rng):
    """deform(a) + deform(b) − base = deform(a + b)"""
    base = face_model.base.vertices
    for _ in range(20):
        a = FaceParams(rng.uniform(-1, 1, 4), rng.uniform(-1, 1, 4))
        b = FaceParams(rng.uniform(-1, 1, 4), rng.uniform(-1, 1, 4))
        ab = FaceParams(a.shape + b.shape, a.expression + b.expression)
        lhs = face_model.deform(a).vertices + face_model.deform(b).vertices - base
        np.testing.assert_allclose(lhs, face_model.deform(ab).vertices, atol=1e-9)


def test_random_draws_keep_triangles_nondegenerate(face_model, rng):
    for _ in range(100):
        mesh = face_model.deform(face_model.sample_params(rng))
        assert mesh.face_areas().min() > 0


def test_deform_rejects_dimension_mismatch(face_model):
    with pytest.raises(ValueError):
        face_model.deform(FaceParams(np.zeros(3), np.zeros(4)))


def test_face_params_limits():
    with pytest.raises(ValueError):
        FaceParams(np.array([0.0, 5.0]), np.zeros(2))
    with pytest.raises(ValueError):
        FaceParams(np.array([np.nan]), np.zeros(1))


def test_face_params_dict_round_trip():
    params = FaceParams(np.array([0.1, -0.2]), np.array([0.3]))
    restored = FaceParams.from_dict(params.to_dict())
    assert np.array_equal(restored.shape, params.shape)
    assert np.array_equal(restored.expression, params.expression)


def test_canonical_camera_pose():
    camera = camera_from_pose(0.0, 0.0, 2.0)
    np.testing.assert_allclose(camera.position, [0.0, 0.0, 2.0], atol=1e-12)
    side = camera_from_pose(math.pi / 2, 0.0, 2.0)
    np.testing.assert_allclose(side.position, [2.0, 0.0, 0.0], atol=1e-12)


def test_camera_on_sphere(rng):
    for _ in range(50):
        camera = camera_from_pose(rng.uniform(-3, 3), rng.uniform(-1.5, 1.5), 2.7)
        assert abs(np.linalg.norm(camera.position) - 2.7) < 1e-9


def test_camera_rejects_invalid_pose():
    with pytest.raises(ValueError):
        camera_from_pose(0.0, math.pi / 2, 2.0)
    with pytest.raises(ValueError):
        camera_from_pose(0.0, 0.0, -1.0)


def test_origin_projects_to_principal_point():
    camera = camera_from_pose(0.3, -0.2, 2.7, resolution=32)
    points, depth = project_points(np.zeros((1, 3)), camera)
    np.testing.assert_allclose(points[0], [camera.cx, camera.cy], atol=1e-9)
    assert depth[0] == pytest.approx(2.7)


def test_lateral_offset_follows_pinhole_formula():
    """画像面に平行な移動 δ は f·δ/d だけ投影をずらす"""
    camera = camera_from_pose(0.0, 0.0, 2.0, resolution=32)
    delta = 0.1
    points, _ = project_points(np.array([[0.0, 0.0, 0.0], [delta, 0.0, 0.0]]), camera)
    assert points[1, 0] - points[0, 0] == pytest.approx(camera.focal * delta / 2.0)


def test_landmarks_inside_image_for_pose_sweep(face_model, rng):
    for _ in range(30):
        camera = camera_from_pose(rng.uniform(-0.6, 0.6), rng.uniform(-0.3, 0.3), 2.7, resolution=32)
        points, valid = face_model.landmarks2d(face_model.sample_params(rng), camera)
        assert valid.all()
        assert points.min() >= 0 and points.max() <= 32


def test_landmarks_are_deterministic(face_model, front_camera):
    params = face_model.zero_params()
    a, _ = face_model.landmarks2d(params, front_camera)
    b, _ = face_model.landmarks2d(params, front_camera)
    assert np.array_equal(a, b)


def test_contour_map_range(face_model, front_camera):
    points, valid = face_model.landmarks2d(face_model.zero_params(), front_camera)
    contour = landmark_contour_map(points, valid, 16)
    assert contour.shape == (1, 16, 16)
    assert float(contour.min()) >= 0.0 and float(contour.max()) <= 1.0
    assert float(contour.max()) > 0.0


def test_model_dict_round_trip(face_model):
    restored = ToyFaceModel.from_dict(face_model.to_dict())
    assert np.array_equal(restored.base.vertices, face_model.base.vertices)
    assert np.array_equal(restored.expression_basis, face_model.expression_basis)
    assert isinstance(Camera.from_dict(camera_from_pose(0.1, 0.2, 2.5).to_dict()), Camera)
