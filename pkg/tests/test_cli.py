import numpy as np
import pytest

from deepnose.cli import build_parser, main, resolve_settings
from deepnose.data_splits import FoldAssignment
from deepnose.model import load_checkpoint
from deepnose.rotation_grid import RotationGrid
from deepnose.synthetic import write_toy_dataset

OUTPUTS = ["metrics.csv", "summary.csv", "thresholds_fold0.csv", "attribution_{cid}.csv",
           "mixture_report.csv", "mixture_summary.csv", "embedding.csv", "alignment.txt"]


def write_config(root, **extra):
    sections = {
        "paths": [f"data_dir = {root / 'data'}", f"cache_dir = {root / 'cache'}", f"output_dir = {root / 'out'}"],
        "grid": ["n_dirs = 2", "n_axial = 2", "iters = 50"],
        "split": ["k = 3"],
        "train": ["epochs = 1", "batch_size = 8", "seeds = 0", "lr = 0.001"],
        "embed": ["dataset = flavornet", "k = 4", "k_prune = 6"],
    }
    for name, body in extra.items():
        sections[name] = sections.get(name, []) + body
    lines = [ln for name, body in sections.items() for ln in [f"[{name}]"] + body]
    path = root / "run.ini"
    path.write_text("\n".join(lines) + "\n")
    return path


def analysis_commands(cid):
    return [["eval"], ["attribute", "--cid", str(cid)], ["mixtures"], ["embed"]]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    mols, table = write_toy_dataset(root, np.random.default_rng(2), n=24)
    cids = table.cids
    (root / "mix.csv").write_text(
        "dataset,pair_id,cids_a,cids_b,distance\n"
        + "".join(f"toy,p{i},{cids[i]};{cids[i + 1]},{cids[i + 2]},{0.1 * (i % 7)}\n" for i in range(10))
        + f"toy,gone,{cids[0]};999999,{cids[1]},0.5\n")
    cfg = write_config(root, mixtures=[f"mixtures_file = {root / 'mix.csv'}"])
    codes = {}
    for cmd in [["grid"], ["split"], ["train"]] + analysis_commands(cids[0]):
        codes[cmd[0]] = main([cmd[0], "--config", str(cfg), "-q", *cmd[1:]])
    return root, cfg, cids, codes


class TestPipeline:
    def test_all_steps_succeed(self, pipeline):
        _, _, _, codes = pipeline
        assert codes == {c: 0 for c in codes}

    def test_artifacts(self, pipeline):
        root, _, cids, _ = pipeline
        out = root / "out"
        grid = RotationGrid.load(out / "grid.dngrid")
        assert len(grid) == 4
        folds = FoldAssignment.load(out / "folds.json")
        assert folds.k == 3 and set(folds.assignment) == set(cids)
        model = load_checkpoint(out / "fold0_seed0.dnckpt")
        assert model.config.outputs == 6 and model.config.n_orientations == 4
        loss = (out / "loss_fold0_seed0.csv").read_text()
        assert "config_hash" in loss and "grid_hash" in loss
        for name in OUTPUTS:
            assert (out / name.format(cid=cids[0])).exists(), name
        summary = (out / "mixture_summary.csv").read_text()
        assert "unscorable:gone" in summary
        metrics = (out / "metrics.csv").read_text()
        assert "mean" in metrics and "checkpoint_hash" in metrics

    def test_rerun_is_byte_identical(self, pipeline):
        root, cfg, cids, _ = pipeline
        out = root / "out"
        before = {n: (out / n.format(cid=cids[0])).read_bytes() for n in OUTPUTS}
        for cmd in analysis_commands(cids[0]):
            assert main([cmd[0], "--config", str(cfg), "-q", *cmd[1:]]) == 0
        after = {n: (out / n.format(cid=cids[0])).read_bytes() for n in OUTPUTS}
        assert before == after

    def test_flag_beats_file(self, pipeline, tmp_path):
        root, cfg, _, _ = pipeline
        target = tmp_path / "folds.json"
        assert main(["split", "--config", str(cfg), "-q", "--k", "4", "--folds-file", str(target)]) == 0
        assert FoldAssignment.load(target).k == 4
        assert FoldAssignment.load(root / "out" / "folds.json").k == 3


class TestErrors:
    def test_missing_folds_file(self, tmp_path, capsys):
        write_toy_dataset(tmp_path, np.random.default_rng(0), n=6)
        cfg = write_config(tmp_path)
        assert main(["train", "--config", str(cfg), "-q"]) == 1
        assert "folds.json" in capsys.readouterr().err

    def test_unknown_config_key(self, tmp_path, capsys):
        cfg = write_config(tmp_path, train=["epochz = 3"])
        assert main(["grid", "--config", str(cfg), "-q"]) == 1
        assert "epochz" in capsys.readouterr().err

    def test_bad_value(self, tmp_path):
        cfg = write_config(tmp_path, train=["lr = fast"])
        assert main(["grid", "--config", str(cfg), "-q"]) == 1

    def test_corrupt_checkpoint_is_runtime_failure(self, pipeline, tmp_path, capsys):
        root, cfg, cids, _ = pipeline
        bad = tmp_path / "bad.dnckpt"
        bad.write_bytes(b"DNCKPT\x01\x00")
        code = main(["attribute", "--config", str(cfg), "-q", "--cid", str(cids[0]),
                     "--checkpoints", str(bad), "--output-dir", str(tmp_path)])
        assert code == 2
        assert "ShapeMismatch" in capsys.readouterr().err

    def test_offline_fetch_of_uncached_cid(self, tmp_path):
        cfg = write_config(tmp_path)
        code = main(["fetch", "--config", str(cfg), "-q", "--cids", "424242"])
        assert code == 2
        assert "424242" in (tmp_path / "out" / "fetch_report.csv").read_text()

    def test_bad_flag_value_is_validation_error(self):
        with pytest.raises(SystemExit) as e:
            main(["train", "--epochs", "many"])
        assert e.value.code == 1


class TestSettings:
    def test_precedence(self, tmp_path, monkeypatch):
        cfg = tmp_path / "c.ini"
        cfg.write_text("[train]\nepochs = 7\nlr = 0.01\n")
        monkeypatch.setenv("DEEPNOSE_CACHE_DIR", "/env/cache")
        args = build_parser().parse_args(["train", "--config", str(cfg), "--epochs", "3"])
        s = resolve_settings(args)
        assert s["train"]["epochs"] == 3  # flag
        assert s["train"]["lr"] == 0.01  # file
        assert s["train"]["batch_size"] == 32  # default
        assert s["paths"]["cache_dir"] == "/env/cache"
        assert s["paths"]["folds_file"].endswith("folds.json")
        args = build_parser().parse_args(["train", "--cache-dir", "flagged"])
        assert resolve_settings(args)["paths"]["cache_dir"] == "flagged"
