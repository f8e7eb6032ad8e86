import numpy as np
import pytest

from fdmeit.forward import (
    ConductivityField,
    InjectionTone,
    Protocol,
    assemble_cem_system,
    forward_all,
    hinged_protocol,
)
from fdmeit.mesh import HingedActuatorParams, Mesh, generate_box_mesh, generate_hinged_actuator_mesh
from fdmeit.sensitivity import (
    Jacobian,
    aggregate_to_hex,
    build_hex_subdomain,
    compute_jacobian,
    load_jacobian,
    save_jacobian,
    sensitivity_map,
)

I0 = 165e-6
# responses below this fraction of a row's peak are under double-precision resolution
RESOLUTION = 1e-6


def central_difference_errors(mesh, sigma, protocol, J, elements, step):
    """Worst relative error of J against central differences, per perturbed element."""
    base = assemble_cem_system(mesh, sigma)
    rowmax = np.abs(J.matrix).max(axis=1)
    worst = []
    for k in elements:
        d = np.zeros(mesh.n_elements)
        d[k] = step * sigma.values[k]
        plus, minus = ConductivityField(sigma.values + d), ConductivityField(sigma.values - d)
        fd = (forward_all(mesh, plus, protocol, base.with_sigma(plus))
              - forward_all(mesh, minus, protocol, base.with_sigma(minus))) / 2
        lin = J.matrix[:, k] * d[k]
        scale = np.maximum(np.abs(fd), RESOLUTION * rowmax * d[k])
        worst.append(float((np.abs(fd - lin) / scale).max()))
    return np.array(worst)


@pytest.fixture(scope="module")
def small_hinged():
    m = generate_hinged_actuator_mesh(HingedActuatorParams(target_edge_length=8.0, hinge_edge_length=4.0,
                                                           thickness_cells=1))
    assert m.n_elements <= 2000
    return m


@pytest.fixture(scope="module")
def hinged_jacobian(hinged_refined, hinged_system, protocol):
    return compute_jacobian(hinged_refined, hinged_system.sigma, protocol, hinged_system)


def test_shape_matches_protocol_and_mesh(hinged_jacobian, hinged_refined):
    assert hinged_jacobian.shape == (9, hinged_refined.n_elements)
    assert len(sensitivity_map(hinged_jacobian, 0)) == hinged_refined.n_elements
    with pytest.raises(IndexError):
        sensitivity_map(hinged_jacobian, 9)


def test_self_pair_sensitivity_is_non_positive(hinged_refined, hinged_system):
    prot = Protocol((InjectionTone(1, 6, I0), InjectionTone(2, 3, I0, 4000.0)), (((1, 6),), ((2, 3),)))
    J = compute_jacobian(hinged_refined, hinged_system.sigma, prot, hinged_system)
    assert (J.matrix <= 0).all()


def test_uniform_scaling_identity(small_hinged):
    mesh = small_hinged.with_contact_impedance(0.0)
    prot = hinged_protocol()
    rng = np.random.default_rng(2)
    sigma = ConductivityField(rng.uniform(0.15, 0.25, mesh.n_elements))
    J = compute_jacobian(mesh, sigma, prot)
    v = forward_all(mesh, sigma, prot)
    np.testing.assert_allclose(J @ sigma.values, -v, rtol=1e-3)


def test_far_chamber_carries_little_sensitivity(hinged_jacobian, hinged_refined, protocol):
    # drive 2-3 read on 1-4 never touches the third chamber
    m = protocol.flat().index((1, (1, 4)))
    row = np.abs(hinged_jacobian.matrix[m])
    far = row[hinged_refined.region_mask("chamber-3")].sum()
    assert far / row.sum() < 0.01


def test_end_to_end_row_peaks_in_a_hinge(hinged_jacobian, hinged_refined, protocol):
    vol = hinged_refined.volumes
    names = hinged_refined.region_names
    for m, (i, pair) in enumerate(protocol.flat()):
        if i != 0 or pair != (3, 6):
            continue
        density = np.abs(sensitivity_map(hinged_jacobian, m, vol))
        # away from the electrode singularities the densest element is in a hinge
        far = np.ones(hinged_refined.n_elements, dtype=bool)
        for e in hinged_refined.electrode_ids:
            far &= np.linalg.norm(hinged_refined.centroids - hinged_refined.electrode_centroid(e), axis=1) > 10
        k = np.flatnonzero(far)[density[far].argmax()]
        assert names[hinged_refined.region_tags[k]].startswith("hinge")


def test_zero_jacobian_gives_zero_map():
    J = Jacobian(np.zeros((3, 7)))
    assert not sensitivity_map(J, 1).any()
    assert not sensitivity_map(J, 1, np.ones(7)).any()


def test_row_reciprocity(hinged_refined, hinged_system):
    a = Protocol((InjectionTone(1, 6, I0),), (((2, 5),),))
    b = Protocol((InjectionTone(2, 5, I0),), (((1, 6),),))
    Ja = compute_jacobian(hinged_refined, hinged_system.sigma, a, hinged_system).matrix[0]
    Jb = compute_jacobian(hinged_refined, hinged_system.sigma, b, hinged_system).matrix[0]
    assert np.abs(Ja - Jb).max() < 1e-9 * np.abs(Ja).max()


@pytest.mark.parametrize("step", [1e-2, 1e-3])
def test_matches_central_differences(small_hinged, step):
    sigma = ConductivityField.uniform(small_hinged, 0.2)
    prot = hinged_protocol()
    J = compute_jacobian(small_hinged, sigma, prot)
    pick = np.random.default_rng(17).choice(small_hinged.n_elements, 20, replace=False)
    assert central_difference_errors(small_hinged, sigma, prot, J, pick, step).max() < 1e-2


def test_heterogeneous_background_matches_differences(small_hinged):
    rng = np.random.default_rng(4)
    sigma = ConductivityField(rng.uniform(0.1, 0.3, small_hinged.n_elements))
    prot = hinged_protocol()
    J = compute_jacobian(small_hinged, sigma, prot)
    pick = rng.choice(small_hinged.n_elements, 5, replace=False)
    assert central_difference_errors(small_hinged, sigma, prot, J, pick, 1e-2).max() < 1e-2


# -- voxel aggregation -------------------------------------------------------------


def test_one_element_per_voxel_copies_columns():
    nodes = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [0.0, 10.0], [1.0, 10.0], [2.0, 10.0]])
    elems = np.array([[0, 1, 3], [1, 4, 3], [1, 2, 4], [2, 5, 4]])
    mesh = Mesh(nodes, elems)
    J = Jacobian(np.random.default_rng(0).normal(size=(3, 4)))
    Jv, sub = aggregate_to_hex(J, mesh, 1.1)
    assert sub.n_voxels == mesh.n_elements
    for e in range(mesh.n_elements):
        assert np.array_equal(Jv.matrix[:, sub.element_voxel[e]], J.matrix[:, e])


def test_aggregation_conserves_row_mass(hinged_jacobian, hinged_refined):
    total = hinged_jacobian.matrix.sum(axis=1)
    for size in (10.0, 5.0):
        Jv, sub = aggregate_to_hex(hinged_jacobian, hinged_refined, size)
        assert (sub.element_voxel >= 0).all()
        np.testing.assert_allclose(Jv.matrix.sum(axis=1), total, rtol=1e-10)
        np.testing.assert_allclose(Jv.matrix, hinged_jacobian.matrix @ sub.aggregation_matrix(), rtol=1e-10,
                                   atol=1e-12 * np.abs(total).max())


def test_voxel_grid_covers_mesh_and_broadcasts_back(hinged_refined):
    sub = build_hex_subdomain(hinged_refined, 10.0)
    assert sub.grid_shape == (20, 5, 1)
    vals = np.arange(sub.n_voxels, dtype=float)
    back = sub.to_elements(vals)
    assert np.array_equal(back, vals[sub.element_voxel])
    centres = sub.voxel_centres()
    assert (centres[:, 2] == 5.0).all()


def test_voxel_smaller_than_an_edge_is_rejected(hinged_jacobian, hinged_refined):
    with pytest.raises(ValueError, match="voxel size"):
        aggregate_to_hex(hinged_jacobian, hinged_refined, 0.1)


def test_bounds_restrict_the_subdomain(hinged_jacobian, hinged_refined):
    Jv, sub = aggregate_to_hex(hinged_jacobian, hinged_refined, 10.0, bounds=([0, 0, 0], [60, 50, 8]))
    inside = sub.element_voxel >= 0
    assert inside.any() and not inside.all()
    assert (hinged_refined.centroids[inside, 0] <= 60).all()


# -- file format -------------------------------------------------------------------


def test_round_trip_is_exact(tmp_path, hinged_jacobian):
    path = tmp_path / "j.eitjac"
    save_jacobian(hinged_jacobian, path)
    back = load_jacobian(path)
    assert np.array_equal(back.matrix, hinged_jacobian.matrix)
    assert back.provenance == hinged_jacobian.provenance


def test_truncated_file_is_rejected(tmp_path):
    path = tmp_path / "j.eitjac"
    save_jacobian(Jacobian(np.ones((2, 3))), path)
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(ValueError):
        load_jacobian(path)


def test_non_finite_matrix_is_rejected():
    with pytest.raises(ValueError):
        Jacobian(np.array([[1.0, np.nan]]))


def test_jacobian_of_two_dimensional_mesh():
    from fdmeit.mesh import ElectrodeSpec
    specs = [ElectrodeSpec(1, axis=0, side="min"), ElectrodeSpec(2, axis=0, side="max")]
    mesh = generate_box_mesh((10.0, 2.0), 1.0, electrodes=specs).with_contact_impedance(0.0)
    prot = Protocol((InjectionTone(1, 2, 1.0),), (((1, 2),),))
    sigma = ConductivityField.uniform(mesh, 1.0)
    J = compute_jacobian(mesh, sigma, prot)
    np.testing.assert_allclose(J @ sigma.values, -forward_all(mesh, sigma, prot), rtol=1e-10)
