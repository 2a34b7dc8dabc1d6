import numpy as np
import pytest

import attentivemos.model as model_mod
from attentivemos import checkpoint
from attentivemos.cli import EXIT_CHECK, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main
from attentivemos.data import Manifest, RatedUtterance, parse_manifest, write_manifest
from attentivemos.metrics import EvalReport
from attentivemos.model import ModelConfig
from attentivemos.numerics import Tensor
from attentivemos.training import DEFAULT_SCHEDULE, sustain_labels


def write_config(path, corpus, out, extra=""):
    text = (
        "model.embed_dim=8\nmodel.context_sizes=4,2\nmodel.pool_kernels=2\nmodel.global_layers=1\n"
        "model.heads=2\nmodel.duration_s=0.04\n"
        "train.epochs=2\ntrain.batch_size=4\n"
        "synth.n_samples=6\nsynth.duration_s=0.04\nsynth.seed=2\n"
        f"paths.train_manifest={corpus}/manifest.csv\npaths.out_dir={out}\n" + extra
    )
    path.write_text(text)
    return str(path)


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    cfg = write_config(root / "synth.txt", root, root)
    assert main(["synth", "--config", cfg, "--quiet"]) == EXIT_OK
    return root


@pytest.fixture(scope="module")
def trained(corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    cfg = write_config(out / "run.txt", corpus, out)
    assert main(["train", "--config", cfg, "--quiet"]) == EXIT_OK
    return out


class TestParamcountGradcheck:
    def test_default_paramcount(self, capsys):
        assert main(["paramcount"]) == EXIT_OK
        out = capsys.readouterr().out.splitlines()
        assert out[0] == "86385" and out[1].startswith("PASS")

    def test_other_config_reports_total_only(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.txt", tmp_path, tmp_path)
        assert main(["paramcount", "--config", cfg]) == EXIT_OK
        assert capsys.readouterr().out.strip().isdigit()

    @pytest.mark.parametrize("precision", ["32", "64"])
    def test_gradcheck_passes(self, precision, capsys):
        assert main(["gradcheck", "--precision", precision]) == EXIT_OK
        assert "PASS" in capsys.readouterr().out

    def test_broken_derivative_is_caught(self, monkeypatch, capsys):
        real = model_mod.gelu

        def gelu_bad_grad(x):
            out = real(x)
            return Tensor._make(out.data, (x,), lambda g: (g * 0.5,), "gelu_bad")

        monkeypatch.setattr(model_mod, "gelu", gelu_bad_grad)
        assert main(["gradcheck"]) == EXIT_CHECK
        assert "FAIL" in capsys.readouterr().out


class TestSynthTrain:
    def test_synth_is_reproducible(self, corpus, tmp_path):
        cfg = write_config(tmp_path / "s.txt", tmp_path, tmp_path)
        assert main(["synth", "--config", cfg, "--quiet"]) == EXIT_OK
        for name in ("manifest.csv", "synth_00003.wav"):
            assert (tmp_path / name).read_bytes() == (corpus / name).read_bytes()

    def test_outputs(self, trained):
        assert (trained / "model.amos").is_file()
        assert len((trained / "history.csv").read_text().splitlines()) == 1 + 2
        assert "model.embed_dim=8" in (trained / "config.txt").read_text()

    def test_rerun_is_byte_identical(self, corpus, trained, tmp_path):
        cfg = write_config(tmp_path / "run.txt", corpus, tmp_path)
        assert main(["train", "--config", cfg, "--quiet"]) == EXIT_OK
        for name in ("model.amos", "history.csv"):
            assert (tmp_path / name).read_bytes() == (trained / name).read_bytes()

    def test_dev_report_printed(self, corpus, tmp_path, capsys):
        cfg = write_config(tmp_path / "run.txt", corpus, tmp_path,
                           f"paths.dev_manifest={corpus}/manifest.csv\n")
        assert main(["train", "--config", cfg, "--quiet"]) == EXIT_OK
        assert "mse,pcc,srcc,n" in capsys.readouterr().out

    def test_ours_without_sigma_refused_before_training(self, corpus, tmp_path):
        m = parse_manifest(corpus / "manifest.csv")
        bare = Manifest([RatedUtterance(str(corpus / e.audio_path), e.mu) for e in m])
        write_manifest(tmp_path / "bare.csv", bare)
        cfg = write_config(tmp_path / "run.txt", corpus, tmp_path / "out")
        text = (tmp_path / "run.txt").read_text().replace(f"{corpus}/manifest.csv", str(tmp_path / "bare.csv"))
        (tmp_path / "run.txt").write_text(text)
        assert main(["train", "--config", cfg, "--quiet"]) == EXIT_USAGE
        assert not (tmp_path / "out").exists()

    def test_missing_manifest_is_a_config_error(self, tmp_path):
        cfg = write_config(tmp_path / "run.txt", tmp_path / "nowhere", tmp_path)
        assert main(["train", "--config", cfg]) == EXIT_USAGE


class TestPredictEval:
    def test_manifest_order_and_repeatability(self, corpus, trained, capsys):
        args = ["predict", "--checkpoint", str(trained / "model.amos"), "--manifest", str(corpus / "manifest.csv")]
        assert main(args) == EXIT_OK
        first = capsys.readouterr().out
        assert main(args) == EXIT_OK
        assert capsys.readouterr().out == first
        paths = [line.split(",")[0] for line in first.splitlines()]
        assert paths == [f"synth_{i:05d}.wav" for i in range(6)]

    def test_clamp(self, corpus, trained, capsys):
        wav = str(corpus / "synth_00000.wav")
        assert main(["predict", "--checkpoint", str(trained / "model.amos"), "--clamp", wav]) == EXIT_OK
        assert 1.0 <= float(capsys.readouterr().out.split(",")[1]) <= 5.0

    def test_audio_longer_than_checkpoint(self, corpus, trained, tmp_path):
        from attentivemos.audio import Waveform, write_wav
        write_wav(tmp_path / "long.wav", Waveform(np.zeros(2000)))
        assert main(["predict", "--checkpoint", str(trained / "model.amos"), str(tmp_path / "long.wav")]) == EXIT_USAGE

    def test_corrupt_audio_is_a_runtime_error(self, trained, tmp_path):
        (tmp_path / "bad.wav").write_bytes(b"garbage")
        assert main(["predict", "--checkpoint", str(trained / "model.amos"), str(tmp_path / "bad.wav")]) == EXIT_RUNTIME

    def test_eval_matches_metric_functions(self, corpus, trained, capsys):
        m = parse_manifest(corpus / "manifest.csv")
        model = checkpoint.load(trained / "model.amos")
        from attentivemos.cli import _strict_waveforms
        preds = model.predict_waveforms(_strict_waveforms([m.resolve(e) for e in m], model))
        assert main(["eval", "--checkpoint", str(trained / "model.amos"), "--manifest",
                     str(corpus / "manifest.csv")]) == EXIT_OK
        csv_line = capsys.readouterr().out.splitlines()[-1]
        assert csv_line == EvalReport.compute(preds, m.mu).to_csv()

    def test_eval_on_own_predictions_is_perfect(self, corpus, trained, tmp_path, capsys):
        model = checkpoint.load(trained / "model.amos")
        model.head.out.b.data[...] += 3.0 - model.predict_waveforms(np.zeros(640))[0]
        checkpoint.save(model, tmp_path / "shifted.amos")
        m = parse_manifest(corpus / "manifest.csv")
        main(["predict", "--checkpoint", str(tmp_path / "shifted.amos"), "--manifest", str(corpus / "manifest.csv")])
        preds = [float(line.split(",")[1]) for line in capsys.readouterr().out.splitlines()]
        own = Manifest([RatedUtterance(str(m.resolve(e)), p) for e, p in zip(m, preds)])
        write_manifest(tmp_path / "own.csv", own)
        assert main(["eval", "--checkpoint", str(tmp_path / "shifted.amos"), "--manifest",
                     str(tmp_path / "own.csv")]) == EXIT_OK
        mse, pcc, srcc, n = capsys.readouterr().out.splitlines()[-1].split(",")
        assert float(mse) == 0.0 and float(pcc) == pytest.approx(1.0) and float(srcc) == pytest.approx(1.0)

    def test_single_entry_correlations_undefined(self, corpus, trained, tmp_path, capsys):
        write_manifest(tmp_path / "one.csv", Manifest([RatedUtterance(str(corpus / "synth_00000.wav"), 3.0)]))
        assert main(["eval", "--checkpoint", str(trained / "model.amos"), "--manifest",
                     str(tmp_path / "one.csv")]) == EXIT_OK
        assert "PCC=undefined SRCC=undefined" in capsys.readouterr().out


class TestSelfteach:
    def test_base_only_matches_train(self, corpus, trained, tmp_path, capsys):
        cfg = write_config(tmp_path / "run.txt", corpus, tmp_path, "sustain.stages=1.0\n")
        assert main(["selfteach", "--config", cfg, "--quiet"]) == EXIT_OK
        rows = (tmp_path / "stage_metrics.csv").read_text().splitlines()
        assert [r.split(",")[0] for r in rows[1:]] == ["base"]
        assert (tmp_path / "stage0.amos").read_bytes() == (trained / "model.amos").read_bytes()

    def test_three_stages(self, corpus, tmp_path):
        stages = ";".join(",".join(repr(a) for a in s) for s in DEFAULT_SCHEDULE)
        cfg = write_config(tmp_path / "run.txt", corpus, tmp_path, f"sustain.stages={stages}\n")
        assert main(["selfteach", "--config", cfg, "--quiet"]) == EXIT_OK
        assert sorted(p.name for p in tmp_path.glob("stage*.amos")) == [f"stage{m}.amos" for m in range(4)]

        m = parse_manifest(corpus / "manifest.csv")
        waves = m.load_waveforms(0.04)
        preds = [checkpoint.load(tmp_path / f"stage{k}.amos").predict_waveforms(waves) for k in range(3)]
        table = np.array([[float(v) for v in line.split(",")[1:]]
                          for line in (tmp_path / "stage_labels.csv").read_text().splitlines()[1:]])
        np.testing.assert_array_equal(table[:, 0], m.mu)
        for k, alpha in enumerate(DEFAULT_SCHEDULE, start=1):
            np.testing.assert_allclose(table[:, k], sustain_labels(m.mu, preds[:k], alpha), rtol=0, atol=1e-6)

    def test_needs_schedule(self, corpus, tmp_path):
        cfg = write_config(tmp_path / "run.txt", corpus, tmp_path)
        assert main(["selfteach", "--config", cfg]) == EXIT_USAGE

    def test_bad_schedule(self, corpus, tmp_path):
        cfg = write_config(tmp_path / "run.txt", corpus, tmp_path, "sustain.stages=0.5,0.6\n")
        assert main(["selfteach", "--config", cfg]) == EXIT_USAGE


class TestUsage:
    def test_no_command(self):
        assert main([]) == EXIT_USAGE

    def test_missing_config_file(self, tmp_path):
        assert main(["train", "--config", str(tmp_path / "none.txt")]) == EXIT_USAGE

    def test_unknown_key(self, tmp_path):
        (tmp_path / "c.txt").write_text("model.colour=blue\n")
        assert main(["paramcount", "--config", str(tmp_path / "c.txt")]) == EXIT_USAGE

    def test_manifest_and_wavs_together(self, trained):
        assert main(["predict", "--checkpoint", str(trained / "model.amos"), "--manifest", "m.csv", "a.wav"]) == EXIT_USAGE

    def test_default_config_is_the_published_one(self):
        from attentivemos.cli import RunConfig
        assert RunConfig().model == ModelConfig()
