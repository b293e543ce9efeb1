import numpy as np
import pytest

from seqlora import matrix as mx
from seqlora.errors import CapacityError, OrthogonalityError, ShapeError
from seqlora.matrix import Matrix
from seqlora.registry import (
    BasisRegistry,
    ComposedModel,
    LoRAFactorPair,
    basis_complement_projector,
    basis_projector,
    read_factor_file,
    write_factor_file,
)
from seqlora.rng import make_rng


def orthogonal_registry(m, ranks, rng, epsilon=0.0):
    """Registry filled with random, sequentially projected bases."""
    reg = BasisRegistry(m, epsilon=epsilon)
    for r in ranks:
        g = mx.gaussian_matrix(m, r, rng)
        reg.append_basis(reg.project(g))
    return reg


def kkt_project(bint, btil):
    """Oracle: solve the equality-constrained nearest-matrix KKT system
    column by column with numpy."""
    m, k = bint.shape
    kkt = np.zeros((m + k, m + k))
    kkt[:m, :m] = np.eye(m)
    kkt[:m, m:] = bint
    kkt[m:, :m] = bint.T
    out = np.zeros_like(btil)
    for j in range(btil.shape[1]):
        rhs = np.concatenate([btil[:, j], np.zeros(k)])
        out[:, j] = np.linalg.solve(kkt, rhs)[:m]
    return out


class TestAppend:
    def test_empty_plus_valid(self):
        reg = BasisRegistry(5)
        reg.append_basis(mx.haar_frame(5, 2, make_rng(0)))
        assert len(reg) == 1

    def test_capacity_saturation(self):
        reg = BasisRegistry(4, epsilon=0.0)
        rng = make_rng(1)
        for _ in range(2):
            reg.append_basis(reg.project(mx.gaussian_matrix(4, 2, rng)))
        with pytest.raises(CapacityError, match="2 concepts"):
            reg.append_basis(mx.gaussian_matrix(4, 2, rng))

    def test_non_orthogonal_rejected(self):
        reg = BasisRegistry(3)
        reg.append_basis(Matrix.from_rows([[1.0], [0.0], [0.0]]))
        skewed = Matrix.from_rows([[0.5], [1.0], [0.0]])  # defect ~0.45
        with pytest.raises(OrthogonalityError, match="defect"):
            reg.append_basis(skewed)

    def test_row_mismatch(self):
        reg = BasisRegistry(4)
        with pytest.raises(ShapeError):
            reg.append_basis(Matrix.zeros(3, 1))


class TestProjector:
    def test_empty_registry_is_identity(self):
        p = BasisRegistry(3).build_projector()
        assert np.array_equal(p.to_numpy(), np.eye(3))

    def test_single_coordinate_basis(self):
        reg = BasisRegistry(3, epsilon=0.0)
        reg.append_basis(Matrix.from_rows([[1.0], [0.0], [0.0]]))
        p = reg.build_projector()
        assert np.abs(p.to_numpy() - np.diag([0.0, 1.0, 1.0])).max() <= 1e-15

    def test_regularized_single_basis(self):
        eps = 1e-8
        reg = BasisRegistry(3, epsilon=eps)
        reg.append_basis(Matrix.from_rows([[1.0], [0.0], [0.0]]))
        p = reg.build_projector().to_numpy()
        assert abs(p[0, 0] - eps / (1 + eps)) <= 1e-6 * eps / (1 + eps)
        off = p - np.diag(np.diag(p))
        assert np.abs(off).max() <= 1e-16

    @pytest.mark.parametrize("epsilon", [0.0, 1e-8, 1e-4])
    def test_symmetry_and_idempotence(self, epsilon):
        m = 8
        reg = orthogonal_registry(m, [2, 2], make_rng(2), epsilon=epsilon)
        p = reg.build_projector()
        assert mx.frob(mx.sub(p, mx.transpose(p))) <= 1e-10
        drift = mx.frob(mx.sub(mx.matmul(p, p), p))
        if epsilon == 0.0:
            assert drift <= 1e-9
        else:
            assert drift <= 10 * epsilon * m

    def test_rank_monotonicity(self):
        m, r = 12, 2
        reg = BasisRegistry(m, epsilon=0.0)
        rng = make_rng(3)
        for t in range(1, 5):
            reg.append_basis(reg.project(mx.gaussian_matrix(m, r, rng)))
            p = reg.build_projector()
            killed = m - mx.trace(p)
            assert abs(killed - t * r) <= 1e-6


class TestProject:
    def test_empty_registry_returns_input(self):
        reg = BasisRegistry(4)
        b = mx.gaussian_matrix(4, 2, make_rng(4))
        assert np.array_equal(reg.project(b).to_numpy(), b.to_numpy())

    def test_drops_constrained_coordinate(self):
        reg = BasisRegistry(3, epsilon=0.0)
        reg.append_basis(Matrix.from_rows([[1.0], [0.0], [0.0]]))
        out = reg.project(Matrix.from_rows([[1.0], [1.0], [0.0]]))
        assert np.abs(out.to_numpy() - [[0.0], [1.0], [0.0]]).max() <= 1e-15

    def test_matches_kkt_oracle(self):
        rng = make_rng(5)
        for _ in range(10):
            reg = orthogonal_registry(6, [2, 2], rng, epsilon=0.0)
            btil = mx.gaussian_matrix(6, 2, rng)
            got = reg.project(btil).to_numpy()
            want = kkt_project(reg.stacked().to_numpy(), btil.to_numpy())
            assert np.abs(got - want).max() <= 1e-9

    def test_residual_orthogonality_and_contraction(self):
        rng = make_rng(6)
        reg = orthogonal_registry(10, [2, 3], rng, epsilon=0.0)
        bint = reg.stacked()
        for _ in range(5):
            btil = mx.gaussian_matrix(10, 2, rng)
            out = reg.project(btil)
            assert mx.frob(mx.matmul(mx.transpose(bint), out)) <= 1e-10 * mx.frob(btil)
            assert mx.frob(out) <= mx.frob(btil) * (1 + 1e-15)

    def test_row_mismatch(self):
        reg = BasisRegistry(4)
        reg.append_basis(mx.haar_frame(4, 1, make_rng(0)))
        with pytest.raises(ShapeError):
            reg.project(Matrix.zeros(5, 1))


def two_concept_model():
    w0 = Matrix.zeros(2, 2)
    model = ComposedModel([w0])
    p1 = LoRAFactorPair(0, Matrix.from_rows([[1.0], [0.0]]), Matrix.from_rows([[2.0], [0.0]]))
    p2 = LoRAFactorPair(0, Matrix.from_rows([[1.0], [0.0]]), Matrix.from_rows([[0.0], [3.0]]))
    model.append_concept([p1])
    model.append_concept([p2])
    return model


class TestComposedModel:
    def test_compose_upto_zero_is_base(self):
        model = two_concept_model()
        assert np.array_equal(model.compose_weight(0, upto=0).to_numpy(), np.zeros((2, 2)))

    def test_compose_single_pair(self):
        model = two_concept_model()
        assert np.array_equal(
            model.compose_weight(0, upto=1).to_numpy(), [[2.0, 0.0], [0.0, 0.0]]
        )

    def test_crosstalk_last_concept_is_zero(self):
        model = two_concept_model()
        assert np.array_equal(model.crosstalk_operator(1, 0).to_numpy(), np.zeros((2, 2)))

    def test_crosstalk_single_outer_product(self):
        model = two_concept_model()
        assert np.array_equal(
            model.crosstalk_operator(0, 0).to_numpy(), [[0.0, 3.0], [0.0, 0.0]]
        )

    def test_crosstalk_equals_weight_difference(self):
        rng = make_rng(7)
        model = ComposedModel([mx.gaussian_matrix(4, 6, rng)])
        for _ in range(4):
            a = mx.gaussian_matrix(4, 2, rng)
            b = mx.gaussian_matrix(6, 2, rng)
            model.append_concept([LoRAFactorPair(0, a, b)])
        for j in range(4):
            diff = mx.sub(model.compose_weight(0), model.compose_weight(0, upto=j + 1))
            c = model.crosstalk_operator(j, 0)
            assert np.abs(diff.to_numpy() - c.to_numpy()).max() <= 1e-12

    def test_annihilation_with_registry_orthogonal_bases(self):
        # Crosstalk of concept j is invisible inside col(B_j) when bases are
        # mutually orthogonal: C_j P_{B_j} = 0.
        rng = make_rng(8)
        m, n, r, t = 12, 5, 2, 5
        reg = BasisRegistry(m, epsilon=0.0)
        model = ComposedModel([Matrix.zeros(n, m)])
        for _ in range(t):
            b = reg.project(mx.gaussian_matrix(m, r, rng))
            reg.append_basis(b)
            model.append_concept([LoRAFactorPair(0, mx.gaussian_matrix(n, r, rng), b)])
        for j in range(t):
            bj = model.concepts[j][0].b
            cj = model.crosstalk_operator(j, 0)
            overlap = mx.frob(mx.matmul(cj, basis_projector(bj)))
            assert overlap <= 1e-9 * max(mx.frob(cj), 1e-30)

    def test_complement_projector(self):
        b = mx.haar_frame(5, 2, make_rng(9))
        p = basis_projector(b).to_numpy()
        pperp = basis_complement_projector(b).to_numpy()
        assert np.abs(p + pperp - np.eye(5)).max() <= 1e-12
        assert np.abs(p @ b.to_numpy() - b.to_numpy()).max() <= 1e-12


class TestPersistence:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = make_rng(10)
        pair = LoRAFactorPair(
            3, mx.gaussian_matrix(5, 2, rng), mx.gaussian_matrix(7, 2, rng)
        )
        path = tmp_path / "factor.bin"
        write_factor_file(path, pair)
        back = read_factor_file(path, layer=3)
        assert back.layer == 3
        assert back.a.data.tobytes() == pair.a.data.tobytes()
        assert back.b.data.tobytes() == pair.b.data.tobytes()

    def test_header_layout(self, tmp_path):
        pair = LoRAFactorPair(
            0, Matrix.from_rows([[1.5]]), Matrix.from_rows([[2.5], [0.5]])
        )
        path = tmp_path / "f.bin"
        write_factor_file(path, pair)
        blob = path.read_bytes()
        assert blob[:4] == b"SQL1"
        assert len(blob) == 4 + 24 + 8 * (1 + 2)
        n, m, r = np.frombuffer(blob, dtype="<u8", count=3, offset=4)
        assert (n, m, r) == (1, 2, 1)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOPE" + b"\x00" * 40)
        with pytest.raises(ValueError, match="magic"):
            read_factor_file(path)

    def test_truncated_rejected(self, tmp_path):
        pair = LoRAFactorPair(
            0, Matrix.from_rows([[1.0]]), Matrix.from_rows([[1.0], [1.0]])
        )
        path = tmp_path / "t.bin"
        write_factor_file(path, pair)
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(ValueError, match="bytes"):
            read_factor_file(path)
