import math

import numpy as np
import pytest
import torch

from conftest import random_cube
from oracles import cross_entropy_oracle, offdiag_mse_oracle
from pstrp import patching, relations, training
from pstrp.errors import TrainingDivergedError, ValidationError
from pstrp.model import build_two_stream, stream_configs_for
from pstrp.patching import Permutation
from pstrp.relations import CANBERRA_SPATIAL, COSINE_TEMPORAL, RelationMatrix
from pstrp.store import StcStore, StcStoreWriter
from pstrp.training import (
    LossWeights,
    TrainConfig,
    distance_loss,
    order_loss,
    squared_offdiag_mean,
    total_loss,
    train,
)


class TestOrderLoss:
    def test_confident_correct_prediction_near_zero(self):
        logits = torch.eye(4, dtype=torch.float64) * 50.0
        loss = order_loss(logits, Permutation.identity(4))
        assert float(loss) < 1e-6

    @pytest.mark.parametrize("n", [4, 7, 9, 16])
    def test_uniform_logits_give_log_n(self, n):
        logits = torch.zeros(n, n, dtype=torch.float64)
        loss = order_loss(logits, Permutation.identity(n))
        assert float(loss) == pytest.approx(math.log(n), abs=1e-9)

    def test_hand_computed_two_by_two(self):
        logits = torch.tensor([[2.0, 0.0], [0.0, 2.0]], dtype=torch.float64)
        loss = order_loss(logits, Permutation.identity(2))
        # -ln(e^2 / (e^2 + 1)) = ln(1 + e^-2)
        assert float(loss) == pytest.approx(0.1269280110429725, abs=1e-9)

    def test_matches_rowwise_oracle(self, rng):
        logits = torch.tensor(rng.normal(size=(5, 5)))
        labels = Permutation(np.random.default_rng(0).permutation(5))
        expected = np.mean(
            [cross_entropy_oracle(logits[s], labels.pi[s]) for s in range(5)]
        )
        assert float(order_loss(logits, labels)) == pytest.approx(expected, abs=1e-9)

    def test_batched_equals_mean_of_singles(self, rng):
        logits = torch.tensor(rng.normal(size=(3, 4, 4)))
        labels = np.stack([np.random.default_rng(k).permutation(4) for k in range(3)])
        batched = float(order_loss(logits, labels))
        singles = [float(order_loss(logits[k], labels[k])) for k in range(3)]
        assert batched == pytest.approx(np.mean(singles), abs=1e-9)

    def test_label_out_of_range_rejected(self):
        with pytest.raises(ValidationError):
            order_loss(torch.zeros(3, 3), np.array([0, 1, 3]))


class TestDistanceLoss:
    def mat(self, d, kind=CANBERRA_SPATIAL):
        return RelationMatrix(np.asarray(d, dtype=np.float64), kind=kind)

    def offdiag(self, n, value):
        d = np.full((n, n), value)
        np.fill_diagonal(d, 0.0)
        return d

    def test_equal_matrices_zero(self):
        m = self.mat(self.offdiag(4, 0.3))
        assert distance_loss(m, m) == 0.0

    def test_half_vs_zero_is_quarter(self):
        pred = self.mat(self.offdiag(4, 0.5))
        target = self.mat(self.offdiag(4, 0.0))
        assert distance_loss(pred, target) == pytest.approx(0.25, abs=1e-12)

    def sym(self, raw):
        d = (raw + raw.T) / 2.0
        np.fill_diagonal(d, 0.0)
        return d

    def test_matches_loop_oracle(self, rng):
        a = self.sym(rng.random((6, 6)))
        b = self.sym(rng.random((6, 6)))
        got = distance_loss(self.mat(a), self.mat(b))
        assert got == pytest.approx(offdiag_mse_oracle(a, b), abs=1e-12)

    def test_asymmetric_matrix_rejected_by_type(self, rng):
        raw = rng.random((4, 4))
        np.fill_diagonal(raw, 0.0)
        raw[0, 1], raw[1, 0] = 0.2, 0.8
        with pytest.raises(ValidationError):
            self.mat(raw)

    def test_kind_mismatch_rejected(self):
        a = self.mat(self.offdiag(3, 0.1), CANBERRA_SPATIAL)
        b = self.mat(self.offdiag(3, 0.1), COSINE_TEMPORAL)
        with pytest.raises(ValidationError):
            distance_loss(a, b)

    def test_size_mismatch_rejected(self):
        with pytest.raises(ValidationError):
            distance_loss(self.mat(self.offdiag(3, 0.1)), self.mat(self.offdiag(4, 0.1)))

    def test_batched_core_equals_mean_of_samples(self, rng):
        pred = torch.tensor(rng.random((3, 5, 5)))
        target = torch.tensor(rng.random((3, 5, 5)))
        for m in (pred, target):
            m.diagonal(dim1=-2, dim2=-1).zero_()
        batched = float(squared_offdiag_mean(pred, target))
        singles = [offdiag_mse_oracle(pred[k], target[k]) for k in range(3)]
        assert batched == pytest.approx(np.mean(singles), abs=1e-12)


class TestTotalLoss:
    def test_unit_parts_default_weights(self):
        value = total_loss(1.0, 1.0, 1.0, 1.0, LossWeights())
        assert value == pytest.approx(2.2, abs=1e-12)

    def test_zero_parts(self):
        assert total_loss(0.0, 0.0, 0.0, 0.0, LossWeights()) == 0.0

    def test_zero_weights_ignore_parts(self):
        w = LossWeights(lambda_s=0, lambda_t=0, lambda_can=0, lambda_cos=0)
        assert total_loss(3.0, 5.0, 7.0, 11.0, w) == 0.0

    def test_linearity_in_weights(self):
        w1 = LossWeights(0.5, 0.25, 0.3, 0.7)
        w2 = LossWeights(1.0, 0.5, 0.6, 1.4)
        parts = (0.9, 1.7, 0.2, 0.4)
        assert total_loss(*parts, w2) == pytest.approx(2 * total_loss(*parts, w1), abs=1e-12)

    def test_nan_part_aborts_naming_term(self):
        with pytest.raises(TrainingDivergedError) as err:
            total_loss(1.0, float("nan"), 1.0, 1.0, LossWeights())
        assert "order_temporal" in str(err.value)

    def test_negative_weight_rejected(self):
        with pytest.raises(ValidationError):
            LossWeights(lambda_s=-1.0)


def make_store(tmp_path, n_videos=2, frames=12, half_window=2, seed=0):
    rng = np.random.default_rng(seed)
    writer = StcStoreWriter(tmp_path / "store", half_window=half_window, channels=1)
    for v in range(n_videos):
        cubes = [
            random_cube(rng, half_window=half_window, video_id=f"v{v}", frame=t)
            for t in range(half_window, frames - half_window)
        ]
        writer.add_video(f"v{v}", cubes)
    writer.close()
    return StcStore(tmp_path / "store")


def make_model(store, spatial_grid=2, seed=0, dropout=0.1):
    torch.manual_seed(seed)
    spatial_cfg, temporal_cfg = stream_configs_for(
        "tiny",
        half_window=store.half_window,
        spatial_grid=spatial_grid,
        channels=store.channels,
        dropout=dropout,
    )
    return build_two_stream(spatial_cfg, temporal_cfg)


class TestTrainLoop:
    def test_empty_store_rejected(self, tmp_path):
        writer = StcStoreWriter(tmp_path / "store", half_window=2, channels=1)
        writer.close()
        store = StcStore(tmp_path / "store")
        model = make_model(make_store(tmp_path / "other"))
        with pytest.raises(ValidationError):
            train(store, model, TrainConfig(epochs=1), LossWeights(),
                  spatial_grid=2, out_dir=tmp_path / "run")

    def test_zero_learning_rate_leaves_weights_bit_identical(self, tmp_path):
        store = make_store(tmp_path)
        model = make_model(store)
        before = {k: v.clone() for k, v in model.state_dict().items()}
        train(store, model,
              TrainConfig(learning_rate=0.0, epochs=2, batch_size=8, seed=1),
              LossWeights(), spatial_grid=2, out_dir=tmp_path / "run")
        after = model.state_dict()
        for key, tensor in before.items():
            assert torch.equal(tensor, after[key]), key

    def test_same_seed_gives_identical_loss_logs(self, tmp_path):
        store = make_store(tmp_path)
        logs = []
        for run in ("a", "b"):
            model = make_model(store, seed=5)
            train(store, model,
                  TrainConfig(learning_rate=1e-3, epochs=2, batch_size=8, seed=5),
                  LossWeights(), spatial_grid=2, out_dir=tmp_path / run)
            logs.append((tmp_path / run / "loss_log.csv").read_bytes())
        assert logs[0] == logs[1]

    def test_loss_log_format_and_history(self, tmp_path):
        store = make_store(tmp_path)
        model = make_model(store)
        result = train(store, model,
                       TrainConfig(learning_rate=1e-3, epochs=3, batch_size=8, seed=2),
                       LossWeights(), spatial_grid=2, out_dir=tmp_path / "run")
        lines = result.loss_log_path.read_text().splitlines()
        assert lines[0] == "epoch,L_S,L_T,L_Can,L_Cos,total"
        assert len(lines) == 4
        assert len(result.history) == 3
        assert result.checkpoint_path.is_file()

    def test_zero_epochs_writes_initial_checkpoint(self, tmp_path):
        store = make_store(tmp_path)
        model = make_model(store, seed=7)
        result = train(store, model, TrainConfig(epochs=0, seed=7), LossWeights(),
                       spatial_grid=2, out_dir=tmp_path / "run")
        assert result.history == []
        assert result.checkpoint_path.is_file()

    def test_checkpoint_preprocess_recorded(self, tmp_path):
        from pstrp.model import load_checkpoint

        store = make_store(tmp_path)
        model = make_model(store)
        result = train(store, model, TrainConfig(epochs=1, batch_size=8), LossWeights(),
                       spatial_grid=2, out_dir=tmp_path / "run")
        _, preprocess, _ = load_checkpoint(result.checkpoint_path)
        assert preprocess["half_window"] == 2
        assert preprocess["spatial_grid"] == 2
        assert preprocess["channels"] == 1


def test_relation_targets_invariant_under_shuffle(rng):
    # targets describe the true patch geometry: shuffling the inputs and
    # conjugating the target by the permutation must agree
    cube = random_cube(rng)
    spatial = patching.slice_spatial(cube, 2)
    target = relations.canberra_matrix(spatial).d
    shuffled, perm = patching.shuffle(spatial, np.random.default_rng(3))
    target_shuffled = relations.canberra_matrix(
        patching.PatchSet(stream="spatial", patches=shuffled.patches)
    ).d
    np.testing.assert_allclose(
        patching.align_relation(target_shuffled, perm), target, atol=1e-12
    )
