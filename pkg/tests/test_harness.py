import csv
import io
import json

import numpy as np
import pytest

from mccl import cli
from mccl import data as D
from mccl import harness as H
from mccl.analysis import histogram_from_pixels, similarity_histogram
from mccl.config import ExperimentConfig
from mccl.errors import ContractError
from mccl.metrics import miou
from mccl.segnet import init_params

SMALL = dict(image_size=16, feature_channels=8, batch=2, n_train=6, n_labeled=2, n_val=2, n_r=4, n_d=8)


@pytest.fixture(scope="module")
def small_cfg():
    return ExperimentConfig(epochs=1, **SMALL)


@pytest.fixture(scope="module")
def small_data(small_cfg):
    return D.build_dataset(small_cfg.dataset_spec())


@pytest.fixture(scope="module")
def rows():
    return H.run_gradcheck(ExperimentConfig(), max_coords=16)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = {"height": 16, "width": 16, "n_samples": 6, "n_val": 2, "seed": 1}
    (root / "spec.json").write_text(json.dumps(spec))
    (root / "cfg.json").write_text(ExperimentConfig(epochs=1, **SMALL).to_json())
    assert cli.main(["gen-data", "--spec", str(root / "spec.json"), "--out", str(root / "data")]) == 0
    assert cli.main(["train", "--config", str(root / "cfg.json"), "--data", str(root / "data"),
                     "--out", str(root / "run")]) == 0
    return root


class TestMiou:
    def test_disjoint_predictions(self):
        gt = np.array([0, 0, 1, 1])
        assert miou(np.array([1, 1, 0, 0]), gt, 4) == 0.0

    def test_hand_counted(self):
        assert miou(np.array([0, 1, 1, 1]), np.array([0, 0, 1, 1]), 4) == pytest.approx(7 / 12)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(0)
        gt, pred = rng.integers(0, 4, 200), rng.integers(0, 4, 200)
        perm = rng.permutation(200)
        assert miou(pred[perm], gt[perm], 4) == miou(pred, gt, 4)


class TestSimilarityHistogram:
    def test_identical_views(self, small_data):
        enc, dec = init_params(0, 1.0, channels=8)
        hist = similarity_histogram(enc, dec, small_data.val()[0], bins=10, photometric=False)
        assert hist.pixel_ratio[-1] == 1.0 and hist.agreement_ratio[-1] == 1.0

    def test_ratio_contract(self, small_data):
        enc, dec = init_params(1, 2.0, channels=8)
        hist = similarity_histogram(enc, dec, small_data.val()[0], bins=10)
        assert len(hist.pixel_ratio) == 10 and len(hist.agreement_ratio) == 10
        assert abs(hist.pixel_ratio.sum() - 1) <= 1e-9
        seen = hist.agreement_ratio[~np.isnan(hist.agreement_ratio)]
        assert np.all((seen >= 0) & (seen <= 1))

    def test_extremes_land_in_end_bins(self):
        sims = np.array([-0.3, 0.1, 0.2, 0.9])
        hist = histogram_from_pixels(sims, np.array([1, 0, 1, 1]), 5)
        assert hist.counts[0] == 1 and hist.counts[-1] == 1
        assert hist.raw_min == -0.3 and hist.raw_max == 0.9

    def test_csv_rows(self):
        hist = histogram_from_pixels(np.linspace(0, 1, 50), np.ones(50), 4)
        rows = list(csv.reader(io.StringIO(hist.csv_text())))
        assert rows[0][0] == "bin" and len(rows) == 5

    def test_rejects_empty(self):
        enc, dec = init_params(0, 1.0, channels=8)
        with pytest.raises(ContractError):
            similarity_histogram(enc, dec, np.zeros((0, 16, 16, 3)))


class TestAblation:
    def test_untrained_arms_agree(self, small_cfg, small_data):
        report = H.run_ablation(small_cfg.replace(epochs=0), [0], dataset=small_data)
        scores = {r["arm"]: r["val_mIoU"] for r in report.rows}
        assert len(set(scores.values())) == 1

    def test_rows_record_requested_toggles(self, small_cfg, small_data):
        report = H.run_ablation(small_cfg.replace(epochs=0), [0, 1], dataset=small_data)
        expected = {name: tog for name, tog in H.ARMS}
        assert len(report.rows) == 10
        for r in report.rows:
            tog = expected[r["arm"]]
            assert (r["ip"], r["if"], r["fp"]) == (tog.ip, tog.if_, tog.fp)

    def test_rerun_gives_identical_report(self, small_cfg, small_data, tmp_path):
        H.run_ablation(small_cfg, [0], tmp_path / "a", dataset=small_data)
        H.run_ablation(small_cfg, [0], tmp_path / "b", dataset=small_data)
        for name in ("ablation_rows.csv", "ablation_summary.csv", "ablation_table.txt"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_failed_arm_does_not_stop_others(self, small_cfg, small_data, monkeypatch):
        real = H.train

        def flaky(cfg, *args, **kwargs):
            if cfg.toggles.fp and not cfg.toggles.if_:
                raise FloatingPointError("boom")
            return real(cfg, *args, **kwargs)

        monkeypatch.setattr(H, "train", flaky)
        report = H.run_ablation(small_cfg.replace(epochs=0), [0], dataset=small_data)
        status = {r["arm"]: r["status"] for r in report.rows}
        assert status.pop("ip_fp") == "failed"
        assert set(status.values()) == {"ok"}
        assert "ip_fp" in report.table()

    def test_needs_a_seed(self, small_cfg):
        with pytest.raises(ValueError):
            H.run_ablation(small_cfg, [])


class TestGradcheck:
    def test_every_term_passes(self, rows):
        assert [r.term for r in rows] == list(H.GRADCHECK_TERMS)
        assert len(rows) == 7 and all(r.passed for r in rows)

    def test_terms_are_active(self, rows):
        # a term that is identically zero would pass trivially
        assert all(r.value > 0 for r in rows)

    def test_corrupted_term_is_flagged(self):
        rows = H.run_gradcheck(ExperimentConfig(), max_coords=4, corrupt={"L_dt": 1.5})
        flagged = {r.term for r in rows if not r.passed}
        assert "L_dt" in flagged and "L_s" not in flagged

    def test_table(self, rows):
        assert H.gradcheck_table(rows).count("PASS") == 7


class TestCli:
    def test_train_outputs(self, workspace):
        assert (workspace / "run" / "metrics.csv").exists()
        assert (workspace / "run" / "final.ckpt").exists()

    def test_eval(self, workspace, capsys):
        capsys.readouterr()
        code = cli.main(["eval", "--ckpt", str(workspace / "run" / "final.ckpt"),
                         "--data", str(workspace / "data")])
        out = json.loads(capsys.readouterr().out)
        assert code == 0 and 0 <= out["mIoU"] <= 1 and out["epoch"] == 1

    def test_analyze(self, workspace, capsys):
        capsys.readouterr()
        code = cli.main(["analyze", "--ckpt", str(workspace / "run" / "final.ckpt"),
                         "--data", str(workspace / "data"), "--bins", "5", "--out", str(workspace / "h.csv")])
        text = capsys.readouterr().out
        assert code == 0 and len(text.splitlines()) == 6
        assert (workspace / "h.csv").read_text() == text

    def test_ablate(self, workspace, capsys):
        capsys.readouterr()
        code = cli.main(["ablate", "--config", str(workspace / "cfg.json"), "--seeds", "0",
                         "--data", str(workspace / "data"), "--out", str(workspace / "abl")])
        lines = capsys.readouterr().out.splitlines()
        assert code == 0 and len(lines) == 6
        assert (workspace / "abl" / "ablation_table.txt").exists()

    def test_ablate_failure_exit_code(self, workspace, monkeypatch):
        def broken(*args, **kwargs):
            raise FloatingPointError("boom")

        monkeypatch.setattr(H, "train", broken)
        code = cli.main(["ablate", "--config", str(workspace / "cfg.json"), "--seeds", "0",
                         "--data", str(workspace / "data"), "--out", str(workspace / "abl_fail")])
        assert code == 1

    @pytest.mark.parametrize("passed,code", [(True, 0), (False, 1)])
    def test_gradcheck_exit_code(self, monkeypatch, capsys, passed, code):
        rows = [H.GradcheckRow(t, 1e-9 if passed else 1.0, passed, 0.5) for t in H.GRADCHECK_TERMS]
        monkeypatch.setattr(cli, "run_gradcheck", lambda cfg, seed: rows)
        assert cli.main(["gradcheck"]) == code
        out = capsys.readouterr().out.splitlines()
        assert out[0] == "term,max_rel_error,passed" and len(out) == 8

    def test_bad_seeds(self):
        with pytest.raises(SystemExit):
            cli.main(["ablate", "--seeds", "a,b", "--out", "x"])
