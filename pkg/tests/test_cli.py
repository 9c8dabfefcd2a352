import numpy as np
import pytest

from vqpurify import cli
from vqpurify import data as dio
from vqpurify.config import ExperimentConfig, parse_config, parse_lines
from vqpurify.errors import ConfigError, NumericalError
from vqpurify.evaluate import purify

TINY = """
[data]
n_train_per_class = 6
n_test_per_class = 2

[attack]
poison_fraction = 0.05
target_label = 1

[purifier]
K = 8
d = 4
width = 4
epochs = 1
batch_size = 20

[classifier]
width = 4
depth = 1
epochs = 1
batch_size = 20
"""


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def test_empty_file_gives_defaults(tmp_path):
    path = tmp_path / "empty.cfg"
    path.write_text("")
    cfg = parse_config(path)
    assert cfg == ExperimentConfig()
    assert (cfg.purifier.codebook_K, cfg.purifier.beta, cfg.purifier.lambda_gan,
            cfg.purifier.learning_rate) == (512, 0.25, 0.1, 4e-4)
    assert (cfg.purifier.batch_size, cfg.purifier.epochs, cfg.purifier.latent_dim) == (256, 100, 256)
    assert cfg.attack.budget == 8 / 255 and cfg.attack.poison_fraction == 0.01


def test_override_layers_on_file(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("purifier.codebook_K = 128\n[eval]\nseeds = 1, 2\n")
    cfg = parse_config(path, ["purifier.K=64"])
    assert cfg.purifier.codebook_K == 64
    assert cfg.eval.seeds == [1, 2]


def test_fraction_values():
    assert parse_config(None, ["attack.budget=16/255"]).attack.budget == 16 / 255


def test_misspelled_key_suggests():
    with pytest.raises(ConfigError, match="codebook_K"):
        parse_config(None, ["purifier.codbook=3"])


def test_type_and_invariant_errors():
    with pytest.raises(ConfigError, match="purifier.codebook_K"):
        parse_config(None, ["purifier.codebook_K=abc"])
    with pytest.raises(ConfigError, match="integer"):
        parse_config(None, ["purifier.epochs=2.5"])
    with pytest.raises(ConfigError, match="lambda_gan"):
        parse_config(None, ["purifier.lambda_gan=-1"])
    with pytest.raises(ConfigError, match="boolean"):
        parse_config(None, ["purifier.enabled=maybe"])
    with pytest.raises(ConfigError):
        parse_config(None, ["attack.type=flip"])
    with pytest.raises(ConfigError, match="lr_schedule"):
        parse_config(None, ["classifier.lr_schedule=step"])
    with pytest.raises(ConfigError, match="gan_warmup_epochs"):
        parse_config(None, ["purifier.gan_warmup_epochs=-2"])


def test_missing_file():
    with pytest.raises(ConfigError):
        parse_config("/nonexistent/c.cfg")


def test_bad_line():
    with pytest.raises(ConfigError, match=":2:"):
        parse_lines("a.b = 1\nnonsense\n", "f")


def test_echo_round_trips(tmp_path):
    cfg = parse_config(None, ["purifier.K=64", "eval.seeds=3,4", "attack.budget=8/255"])
    path = cfg.echo(tmp_path)
    assert parse_config(path) == cfg


# ---------------------------------------------------------------------------
# command line
# ---------------------------------------------------------------------------

@pytest.fixture()
def run(tmp_path):
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(TINY)
    out = tmp_path / "out"

    def invoke(*args):
        return cli.main([*args, "--config", str(cfg), "--out", str(out), "--seed", "0"])

    invoke.out = out
    return invoke


def test_stage_order_diagnostic(run, capsys):
    assert run("poison") == 2
    assert "run `gen-data` first" in capsys.readouterr().err
    assert run("train-purifier") == 2
    assert "run `poison` first" in capsys.readouterr().err


def test_full_staged_pipeline(run, capsys):
    out = run.out
    assert run("gen-data") == 0
    assert run("poison") == 0
    lines = (out / cli.POISON_INDEX).read_text().splitlines()
    assert lines[0].startswith("# budget=")
    assert len(lines) == 1 + 3
    assert run("train-classifier") == 2         # needs the purifier
    assert "run `train-purifier` first" in capsys.readouterr().err
    assert run("train-purifier") == 0
    assert (out / "purifier_log.csv").exists()
    assert run("train-classifier") == 0
    assert run("evaluate", "--staged") == 0
    text = capsys.readouterr().out
    assert "poison success rate" in text and "natural accuracy" in text
    assert (out / "predictions.csv").exists()
    assert (out / "resolved.cfg").exists()
    assert run("report") == 0


def test_purify_two_passes(run, tmp_path):
    run("gen-data")
    run("poison")
    run("train-purifier")
    dest = tmp_path / "p.ckpt"
    assert run("purify", "--in", str(run.out / cli.TEST_SET), "--passes", "2", "--dest", str(dest)) == 0
    cfg = parse_config(run.out / "resolved.cfg")
    G = cli._load_generator(cfg, run.out)
    src = dio.load_image_set(run.out / cli.TEST_SET)
    expect = G.reconstruct(G.reconstruct(src.images))
    assert dio.load_image_set(dest).images.tobytes() == expect.tobytes()
    assert expect.tobytes() == purify(src.images, G, 2).tobytes()


def test_evaluate_and_ablate_commands(tmp_path, capsys):
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(TINY)
    out = tmp_path / "ev"
    assert cli.main(["evaluate", "--config", str(cfg), "--out", str(out), "--seeds", "0,1"]) == 0
    report = (out / "report.csv").read_text().splitlines()
    assert [r.split(",")[0] for r in report[1:]] == ["seed=0", "seed=1", "mean", "std"]
    ab = tmp_path / "ab"
    assert cli.main(["ablate", "--config", str(cfg), "--out", str(ab), "--axis", "K",
                     "--values", "4,8", "--seed", "0"]) == 0
    assert (ab / "ablation.csv").read_text().startswith("codebook_K,")
    assert cli.main(["ablate", "--config", str(cfg), "--out", str(ab), "--axis", "K", "--values", "4"]) == 1


def test_config_error_exit_code(tmp_path, capsys):
    assert cli.main(["gen-data", "--out", str(tmp_path), "--set", "purifier.codbook=1"]) == 1
    assert "did you mean" in capsys.readouterr().err


def test_numerical_error_exit_code(tmp_path, monkeypatch):
    def boom(*a):
        raise NumericalError("loss went nan", batch=4)
    monkeypatch.setitem(cli.COMMANDS, "gen-data", boom)
    assert cli.main(["gen-data", "--out", str(tmp_path)]) == 3


def test_output_root_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "envroot"))
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(TINY)
    assert cli.main(["gen-data", "--config", str(cfg)]) == 0
    assert (tmp_path / "envroot" / cli.TRAIN_SET).exists()


def test_reference_mode_runs(tmp_path):
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(TINY)
    assert cli.main(["gen-data", "--config", str(cfg), "--out", str(tmp_path), "--reference"]) == 0
    ds = dio.load_image_set(tmp_path / cli.TRAIN_SET)
    assert len(ds) == 60 and np.bincount(ds.labels).tolist() == [6] * 10
