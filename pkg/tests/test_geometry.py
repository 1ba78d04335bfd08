import numpy as np
import pytest

from denopt.geometry import (
    FEATURE_SCALE,
    K_LIGAND_TYPES,
    K_POCKET_TYPES,
    LigandCloud,
    O3Transform,
    PocketCloud,
    apply_o3,
    center_on_ligand,
    cloud_from_xyz,
    clouds_to_xyz,
    project_com_free,
    sample_random_o3,
)


def make_pocket(rng, n=6):
    onehot = np.zeros((n, K_POCKET_TYPES))
    onehot[np.arange(n), rng.integers(0, K_POCKET_TYPES, n)] = 1.0
    return PocketCloud(coords=rng.standard_normal((n, 3)) * 3, types=onehot)


def make_ligand(rng, n=5):
    return LigandCloud.from_types(
        rng.standard_normal((n, 3)), rng.integers(0, K_LIGAND_TYPES, n)
    )


def test_center_on_ligand_basics():
    rng = np.random.default_rng(0)
    pocket, ligand = make_pocket(rng), make_ligand(rng)
    p2, l2 = center_on_ligand(pocket, ligand)
    assert np.max(np.abs(l2.coords.mean(axis=0))) < 1e-12
    shift = ligand.coords.mean(axis=0)
    assert np.allclose(p2.coords, pocket.coords - shift)
    assert np.array_equal(l2.features, ligand.features)


def test_center_already_centered_is_identity():
    rng = np.random.default_rng(1)
    ligand = make_ligand(rng)
    ligand = LigandCloud(coords=project_com_free(ligand.coords), features=ligand.features)
    pocket = make_pocket(rng)
    p2, l2 = center_on_ligand(pocket, ligand)
    assert np.max(np.abs(l2.coords - ligand.coords)) < 1e-12
    assert np.max(np.abs(p2.coords - pocket.coords)) < 1e-12


def test_center_commutes_with_translation():
    rng = np.random.default_rng(2)
    pocket, ligand = make_pocket(rng), make_ligand(rng)
    v = np.array([10.0, -4.0, 2.5])
    p1, l1 = center_on_ligand(pocket, ligand)
    p2, l2 = center_on_ligand(
        PocketCloud(pocket.coords + v, pocket.types),
        LigandCloud(ligand.coords + v, ligand.features),
    )
    assert np.allclose(p1.coords, p2.coords, atol=1e-12)
    assert np.allclose(l1.coords, l2.coords, atol=1e-12)


def test_center_single_atom():
    ligand = LigandCloud.from_types(np.array([[3.0, 4.0, 5.0]]), [0])
    pocket = PocketCloud(np.array([[0.0, 0.0, 0.0]]), np.eye(K_POCKET_TYPES)[[0]])
    p2, l2 = center_on_ligand(pocket, ligand)
    assert np.allclose(l2.coords, 0.0)
    assert np.allclose(p2.coords, [[-3.0, -4.0, -5.0]])


def test_project_com_free():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((8, 3))
    p = project_com_free(x)
    assert np.max(np.abs(p.sum(axis=0))) < 1e-12
    # idempotent
    assert np.allclose(project_com_free(p), p, atol=1e-15)
    # distance removed equals the replicated mean
    assert np.linalg.norm(x - p) == pytest.approx(
        np.linalg.norm(np.tile(x.mean(axis=0), (8, 1))), rel=1e-12
    )
    # N=1 forced to zero
    assert np.allclose(project_com_free(np.array([[1.0, 2.0, 3.0]])), 0.0)


def test_apply_o3_preserves_distances():
    rng = np.random.default_rng(4)
    tf = sample_random_o3(7)
    x = rng.standard_normal((10, 3))
    y = apply_o3(tf, x)
    dx = np.linalg.norm(x[:, None] - x[None, :], axis=-1)
    dy = np.linalg.norm(y[:, None] - y[None, :], axis=-1)
    assert np.max(np.abs(dx - dy)) < 1e-9
    # mean-zero stays mean-zero
    z = project_com_free(x)
    assert np.max(np.abs(apply_o3(tf, z).mean(axis=0))) < 1e-12


def test_apply_o3_identity_and_reflection():
    x = np.random.default_rng(5).standard_normal((4, 3))
    ident = O3Transform(np.eye(3))
    assert np.array_equal(apply_o3(ident, x), x)
    refl = O3Transform(np.diag([1.0, 1.0, -1.0]))
    assert np.allclose(apply_o3(refl, apply_o3(refl, x)), x)


def test_o3_rejects_non_orthogonal():
    with pytest.raises(ValueError):
        O3Transform(np.eye(3) * 2.0)


def test_sample_random_o3_deterministic():
    a = sample_random_o3(42)
    b = sample_random_o3(42)
    assert np.array_equal(a.rotation, b.rotation)
    dets = {round(sample_random_o3(s).determinant) for s in range(30)}
    assert dets == {-1, 1}
    for s in range(10):
        r = sample_random_o3(s).rotation
        assert np.max(np.abs(r.T @ r - np.eye(3))) < 1e-10


def test_clean_ligand_flags():
    lig = LigandCloud.from_types(np.zeros((3, 3)), [0, 2, 4])
    assert lig.is_clean()
    assert np.allclose(lig.features.sum(axis=1), FEATURE_SCALE)
    noisy = LigandCloud(coords=lig.coords, features=lig.features + 0.01)
    assert not noisy.is_clean()


def test_xyz_roundtrip():
    rng = np.random.default_rng(6)
    lig = make_ligand(rng)
    text = clouds_to_xyz(lig, "ligand")
    back = cloud_from_xyz(text)
    assert isinstance(back, LigandCloud)
    assert np.array_equal(back.coords, lig.coords)
    assert np.array_equal(back.features, lig.features)

    pocket = make_pocket(rng)
    back_p = cloud_from_xyz(clouds_to_xyz(pocket, "pocket"))
    assert np.array_equal(back_p.coords, pocket.coords)
    assert np.array_equal(back_p.types, pocket.types)

    with pytest.raises(ValueError):
        clouds_to_xyz(lig, "protein")
    with pytest.raises(ValueError):
        cloud_from_xyz("3\nrole=thing\n")
