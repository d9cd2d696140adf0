import csv
import hashlib

import numpy as np
import pytest

from exemplar import cli, config, features, net, surrogate, tensorimg
from exemplar.config import ConfigError, RunConfig

TOY = """\
seed = 5
data.synthetic_images = 4
data.image_size = 64
data.n_classes = 8
data.samples_per_class = 8
data.patch_size = 16
data.val_frac = 0.25
train.arch = 8c5-16f
train.batch_size = 16
train.max_rounds = 2
sweep.patches = 3
"""


def run(*argv):
    return cli.main([str(a) for a in argv])


def digest(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "toy.cfg").write_text(TOY)
    assert run("gen", "--config", d / "toy.cfg", "--out", d / "a.exds") == 0
    assert run("train", "--config", d / "toy.cfg", "--dataset", d / "a.exds", "--out", d / "a.exnet") == 0
    return d


# ------------------------------------------------------------------- config ----

def test_config_parsing():
    cfg = RunConfig.parse("seed = 3  # root\n\ndata.n_classes=12\ntransform.rotate_deg = 10\n")
    assert cfg.int("seed") == 3 and cfg.int("data.n_classes") == 12
    assert cfg.get("train.arch") == RunConfig().get("train.arch")
    assert cfg.ranges().rotate_deg == 10.0
    with pytest.raises(ConfigError):
        RunConfig.parse("data.colour = 1\n")
    with pytest.raises(ConfigError):
        RunConfig.parse("seed 3\n")
    with pytest.raises(ConfigError):
        RunConfig.parse("seed = x\n").int("seed")


def test_config_text_round_trip():
    cfg = RunConfig.parse(TOY)
    again = RunConfig.parse(cfg.to_text())
    assert again.values == cfg.values and again.ranges() == cfg.ranges()


def test_stage_seeds_are_independent_of_call_order():
    a = config.stage_seed(7, "images")
    assert config.stage_seed(7, "seeds") != a
    assert config.stage_seed(7, "images") == a and config.stage_seed(8, "images") != a


# ---------------------------------------------------------------------- gen ----

def test_gen_is_deterministic(work, capsys):
    assert run("gen", "--config", work / "toy.cfg", "--out", work / "b.exds") == 0
    out = capsys.readouterr().out
    assert digest(work / "a.exds") == digest(work / "b.exds")
    manifest = (work / "b.exds.manifest").read_text()
    assert f"manifest sha256 {hashlib.sha256(manifest.encode()).hexdigest()}" in out
    assert f"dataset_sha256 = {digest(work / 'b.exds')}" in manifest
    ds = surrogate.load_exds(work / "a.exds")
    assert (ds.n_classes, ds.samples_per_class, ds.patch_size) == (8, 8, 16)


def test_gen_seed_flag_changes_output(work):
    assert run("gen", "--config", work / "toy.cfg", "--seed", 6, "--out", work / "c.exds") == 0
    assert digest(work / "a.exds") != digest(work / "c.exds")


def test_gen_usage_errors(work, tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text(TOY + f"data.images = {tmp_path / 'nowhere'}\n")
    assert run("gen", "--config", cfg, "--out", tmp_path / "x.exds") == 2
    assert "image directory not found" in capsys.readouterr().err
    cfg.write_text(TOY + "data.bogus = 1\n")
    assert run("gen", "--config", cfg, "--out", tmp_path / "x.exds") == 2


def test_gen_from_image_directory(tmp_path):
    imgs = tmp_path / "imgs"
    imgs.mkdir()
    rng = np.random.default_rng(0)
    for i in range(2):
        tensorimg.write_image(imgs / f"{i}.png", tensorimg.gaussian_blur(rng.random((48, 48, 3)), 1.0))
    cfg = tmp_path / "dir.cfg"
    cfg.write_text(TOY.replace("data.synthetic_images = 4", f"data.images = {imgs}"))
    assert run("gen", "--config", cfg, "--out", tmp_path / "d.exds") == 0


# -------------------------------------------------------------------- train ----

def test_train_outputs(work):
    state = net.load_checkpoint(work / "a.exnet")
    assert net.format_arch(state.spec).startswith("8c5")
    rows = list(csv.reader(open(str(work / "a.exnet") + ".history.csv")))
    assert rows[0] == ["epoch", "train_loss", "val_err", "lr"] and len(rows) == 3


def test_train_bad_arch(work, capsys):
    assert run("train", "--dataset", work / "a.exds", "--arch", "8x5-16f", "--out", work / "z.exnet") == 2
    assert "architecture" in capsys.readouterr().err


def test_resume_reproduces_forward(work):
    assert run("train", "--config", work / "toy.cfg", "--dataset", work / "a.exds",
               "--resume", work / "a.exnet", "--max-rounds", 0, "--out", work / "r.exnet") == 0
    a, r = net.load_checkpoint(work / "a.exnet"), net.load_checkpoint(work / "r.exnet")
    x = surrogate.load_exds(work / "a.exds").data[:5]
    assert np.array_equal(net.forward(a, x)[-1], net.forward(r, x)[-1])


def test_train_is_deterministic(work):
    assert run("train", "--config", work / "toy.cfg", "--dataset", work / "a.exds",
               "--out", work / "a2.exnet") == 0
    assert digest(work / "a.exnet") == digest(work / "a2.exnet")


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_non_finite_exit_code(work, capsys):
    assert run("train", "--config", work / "toy.cfg", "--dataset", work / "a.exds",
               "--lr0", 1e30, "--out", work / "nan.exnet") == 3
    assert "last good state" in capsys.readouterr().err


# ------------------------------------------------------------------ extract ----

def _write_images(d, n=3, size=24):
    rng = np.random.default_rng(1)
    paths = []
    for i in range(n):
        p = d / f"im{i}.png"
        tensorimg.write_image(p, rng.random((size, size, 3)))
        paths.append(p)
    return paths


def test_extract(work, tmp_path):
    paths = _write_images(tmp_path)
    args = ["extract", "--net", work / "a.exnet", "--dataset", work / "a.exds", "--layer", 1,
            "--pooling", "quadrant", "--out"]
    assert run(*args, tmp_path / "e1.exdesc", *paths) == 0
    assert run(*args, tmp_path / "e2.exdesc", tmp_path) == 0
    assert digest(tmp_path / "e1.exdesc") == digest(tmp_path / "e2.exdesc")
    vecs = features.load_exdesc(tmp_path / "e1.exdesc")
    assert vecs.shape == (3, 8 * 4)


def test_extract_patch_sized_matches_training_activations(work, tmp_path):
    state = net.load_checkpoint(work / "a.exnet")
    ds = surrogate.load_exds(work / "a.exds")
    img = np.random.default_rng(2).random((16, 16, 3))
    tensorimg.write_image(tmp_path / "p.png", img)
    img = tensorimg.read_image(tmp_path / "p.png")
    assert run("extract", "--net", work / "a.exnet", "--dataset", work / "a.exds", "--layer", 2,
               "--pooling", "none", "--out", tmp_path / "p.exdesc", tmp_path / "p.png") == 0
    got = features.load_exdesc(tmp_path / "p.exdesc")[0]
    ref = net.forward(state, (img - ds.pixel_mean)[None])[features.block_end(state.spec, 2)][0]
    assert np.allclose(got, ref.ravel(), atol=1e-5)


def test_extract_usage_errors(work, tmp_path):
    with pytest.raises(SystemExit) as e:
        run("extract", "--net", work / "a.exnet", "--pooling", "average", "--out", tmp_path / "x", "y.png")
    assert e.value.code == 2
    assert run("extract", "--net", work / "a.exnet", "--out", tmp_path / "x", tmp_path / "no.png") == 2


# -------------------------------------------------------------------- sweep ----

def test_sweep_classes(work):
    assert run("sweep", "classes", "--config", work / "toy.cfg", "--grid", "4,6,8",
               "--out", work / "classes.csv") == 0
    rows = list(csv.DictReader(open(work / "classes.csv")))
    assert [r["n_classes"] for r in rows] == ["4", "6", "8"]
    assert all(0.0 <= float(r["val_err"]) <= 1.0 for r in rows)


def test_sweep_ablation(work, tmp_path):
    assert run("sweep", "ablation", "--config", work / "toy.cfg", "--grid", "none,rotation",
               "--out", work / "abl.csv") == 0
    rows = list(csv.DictReader(open(work / "abl.csv")))
    assert [r["removed_family"] for r in rows] == ["none", "rotation"]
    assert run("sweep", "ablation", "--config", work / "toy.cfg", "--grid", "warp",
               "--out", tmp_path / "x.csv") == 2


def test_sweep_magnitude(work):
    assert run("sweep", "magnitude", "--config", work / "toy.cfg", "--net", work / "a.exnet",
               "--dataset", work / "a.exds", "--grid", "translation", "--out", work / "mag.csv") == 0
    rows = list(csv.DictReader(open(work / "mag.csv")))
    assert rows[0]["magnitude"] == "0.0" and float(rows[0]["raw"]) == 0.0
    assert max(float(r["normalized"]) for r in rows) == 1.0


# -------------------------------------------------------------- pairs/match ----

@pytest.fixture(scope="module")
def pairs(tmp_path_factory):
    d = tmp_path_factory.mktemp("pairs")
    assert run("pairs", "--out", d, "--regions", 8, "--seed", 1) == 0
    return d


def test_pairs_layout(pairs):
    rows = list(csv.DictReader(open(pairs / "pairs.csv")))
    assert len(rows) == 24
    for r in rows:
        assert (pairs / r["image"]).exists() and (pairs / r["mapping"]).exists()
        assert (pairs / "regions" / (r["pair_id"] + ".reg")).exists()


def test_match_rows_and_summary(pairs, tmp_path):
    assert run("match", "--pairs", pairs / "pairs.csv", "--regions", pairs / "regions",
               "--descriptor", "gradhist", "--out", tmp_path / "m.csv") == 0
    rows = list(csv.DictReader(open(tmp_path / "m.csv")))
    assert len(rows) == 24 and all(0.0 <= float(r["AP"]) <= 1.0 for r in rows)
    summary = list(csv.DictReader(open(tmp_path / "m.summary.csv")))
    for s in summary:
        aps = [float(r["AP"]) for r in rows if r["transform"] == s["transform"]]
        assert abs(float(s["mean_AP"]) - np.mean(aps)) <= 1e-12 and int(s["pairs"]) == len(aps)


def test_match_identity_pair_has_ap_one(tmp_path):
    rng = np.random.default_rng(3)
    img = tensorimg.gaussian_blur(rng.random((120, 120, 3)), 1.0)
    tensorimg.write_image(tmp_path / "b.png", img)
    (tmp_path / "id.hom").write_text("homography\n1 0 0\n0 1 0\n0 0 1\n")
    (tmp_path / "regions").mkdir()
    reg = "exreg v1\n" + "".join(f"{30 + 30 * (i % 3)} {30 + 30 * (i // 3)} 0.01 0 0.01 0\n"
                                 for i in range(6))
    (tmp_path / "regions" / "b.reg").write_text(reg)
    (tmp_path / "regions" / "p0.reg").write_text(reg)
    (tmp_path / "pairs.csv").write_text("pair_id,family,magnitude,base,image,mapping\n"
                                        "p0,identity,0,b.png,b.png,id.hom\n")
    assert run("match", "--pairs", tmp_path / "pairs.csv", "--regions", tmp_path / "regions",
               "--descriptor", "pixel", "--out", tmp_path / "m.csv") == 0
    rows = list(csv.DictReader(open(tmp_path / "m.csv")))
    assert float(rows[0]["AP"]) == 1.0
    (tmp_path / "regions" / "p0.reg").unlink()
    assert run("match", "--pairs", tmp_path / "pairs.csv", "--regions", tmp_path / "regions",
               "--out", tmp_path / "m2.csv") == 2


# ---------------------------------------------------------------- objective ----

@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_objective(work, tmp_path):
    assert run("objective", "--net", work / "a.exnet", "--dataset", work / "a.exds",
               "--out", tmp_path / "o.csv") == 0
    lines = (tmp_path / "o.csv").read_text().splitlines()
    assert lines[0] == "class_id,regularizer_gap" and len(lines) == 1 + 8 + 3
    state = net.load_checkpoint(work / "a.exnet")
    state.params[state.spec.weight_layers()[-1]]["W"][:] = np.inf
    net.save_checkpoint(state, tmp_path / "inf.exnet")
    assert run("objective", "--net", tmp_path / "inf.exnet", "--dataset", work / "a.exds",
               "--out", tmp_path / "o2.csv") == 3


def test_threads_env(monkeypatch):
    monkeypatch.setenv("EXEMPLAR_THREADS", "3")
    assert cli._threads(cli.build_parser().parse_args(["gen", "--out", "x"])) == 3
    assert cli._threads(cli.build_parser().parse_args(["gen", "--out", "x", "--threads", "2"])) == 2
