import csv
import json
import struct

import numpy as np
import pytest

from vitkit import Rng, ViTConfig, build_model, load_checkpoint, save_checkpoint
from vitkit.bench import CSV_FIELDS, bench
from vitkit.checkpoint import read_header
from vitkit.cli import main
from vitkit.data import load_cifar10, read_cifar10_file, synth_dataset, write_cifar10_file
from vitkit.errors import ConfigError, FormatError, TrainingError
from vitkit.optim import OptimizerConfig
from vitkit.training import fit, train

TINY = ViTConfig(width=16, depth=2, heads=2, image_size=32, num_classes=10)


# -- CIFAR-10 -------------------------------------------------------------------

def test_cifar_valid_file(tmp_path):
    rng = Rng(0)
    imgs = rng.integers(0, 256, (10_000, 3, 32, 32)).astype(np.uint8)
    labels = rng.integers(0, 10, 10_000)
    write_cifar10_file(tmp_path / "data_batch_1.bin", imgs, labels)
    ds = load_cifar10(tmp_path / "data_batch_1.bin")
    assert ds.images.shape == (10_000, 3, 32, 32) and ds.source == "cifar10"
    raw = (tmp_path / "data_batch_1.bin").read_bytes()
    assert ds.labels[0] == raw[0]
    assert np.array_equal(ds.labels, labels)
    ds2 = load_cifar10(tmp_path, "train")
    assert np.array_equal(ds2.images, ds.images)


def test_cifar_truncated_and_bad_label(tmp_path):
    write_cifar10_file(tmp_path / "a.bin", np.zeros((2, 3, 32, 32)), [0, 1])
    raw = (tmp_path / "a.bin").read_bytes()
    (tmp_path / "t.bin").write_bytes(raw[:4000])
    with pytest.raises(FormatError, match="offset 3073"):
        read_cifar10_file(tmp_path / "t.bin")
    bad = bytearray(raw)
    bad[0] = 10
    (tmp_path / "l.bin").write_bytes(bytes(bad))
    with pytest.raises(FormatError, match="record 0"):
        read_cifar10_file(tmp_path / "l.bin")
    with pytest.raises(FormatError):
        load_cifar10(tmp_path, "test")  # directory without test_batch.bin


# -- synthetic data ----------------------------------------------------------------

def test_synth_determinism_and_balance():
    a, b = synth_dataset(4, 100), synth_dataset(4, 100)
    assert a.images.tobytes() == b.images.tobytes()
    assert np.bincount(a.labels, minlength=10).tolist() == [10] * 10
    assert a.labels.min() >= 0 and a.labels.max() < 10
    assert abs(float(a.images.std()) - 1.0) < 0.05
    with pytest.raises(ConfigError):
        synth_dataset(0, 0)


def test_synth_linear_probe_beats_chance():
    tr, te = synth_dataset(0, 2000, 32), synth_dataset(0, 500, 32, split="test")
    x, xt = tr.images.reshape(len(tr), -1).astype(np.float64), te.images.reshape(len(te), -1)
    # nearest class mean is a linear classifier: argmax_c <w_c, x> + b_c
    means = np.stack([x[tr.labels == c].mean(0) for c in range(10)])
    scores = xt @ means.T - 0.5 * (means ** 2).sum(1)
    assert (scores.argmax(1) == te.labels).mean() > 0.2


# -- checkpoints ----------------------------------------------------------------------

def test_checkpoint_roundtrip_ti(tmp_path):
    cfg = ViTConfig(width=192, depth=12, heads=3, image_size=32, num_classes=10)
    m = build_model(cfg, Rng(1))
    save_checkpoint(m, tmp_path / "ti.vtc")
    back = load_checkpoint(tmp_path / "ti.vtc")
    assert all(a.tobytes() == b.tobytes() for a, b in zip(m.state_dict().values(), back.state_dict().values()))
    header, start, _ = read_header(tmp_path / "ti.vtc")
    assert len(header["manifest"]) == len(m.named_parameters()) + len(m.named_buffers())
    assert start % 64 == 0 and all(e["offset"] % 64 == 0 for e in header["manifest"])


def _rewrite_header(path, mutate):
    header, start, blob = read_header(path)
    mutate(header)
    data = blob[start:]
    h = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    new_start = (12 + len(h) + 63) // 64 * 64
    path.write_bytes(b"VTC1" + struct.pack("<Q", len(h)) + h + b"\0" * (new_start - 12 - len(h)) + data)


def test_checkpoint_errors(tmp_path):
    m = build_model(TINY.replace(stem_kind="hmlp"), Rng(2))
    p = tmp_path / "m.vtc"
    save_checkpoint(m, p)
    good = p.read_bytes()

    (tmp_path / "magic.vtc").write_bytes(b"XXXX" + good[4:])
    with pytest.raises(FormatError, match="magic"):
        load_checkpoint(tmp_path / "magic.vtc")

    def overlap(h):
        h["manifest"][3]["offset"] = h["manifest"][2]["offset"]
    q = tmp_path / "overlap.vtc"
    q.write_bytes(good)
    _rewrite_header(q, overlap)
    name = json.loads(json.dumps(read_header(p)[0]))["manifest"][3]["name"]
    with pytest.raises(FormatError, match=name.replace(".", r"\.")):
        load_checkpoint(q)

    def shape(h):
        h["manifest"][0]["shape"] = [1, 2]
    r = tmp_path / "shape.vtc"
    r.write_bytes(good)
    _rewrite_header(r, shape)
    with pytest.raises(FormatError, match="shape"):
        load_checkpoint(r)

    def drop(h):
        h["manifest"].pop()
    s = tmp_path / "count.vtc"
    s.write_bytes(good)
    _rewrite_header(s, drop)
    with pytest.raises(FormatError, match="inventory"):
        load_checkpoint(s)

    (tmp_path / "short.vtc").write_bytes(good[:-100])
    with pytest.raises(FormatError, match="past end"):
        load_checkpoint(tmp_path / "short.vtc")


# -- training -------------------------------------------------------------------------

def test_train_one_epoch_plumbing(tmp_path):
    data = synth_dataset(0, 64, 32)
    model, rows = train(TINY, data, 1, OptimizerConfig(batch_size=16), 0, out_dir=tmp_path)
    assert len(rows) == 1 and np.isfinite(rows[0]["train_loss"])
    with open(tmp_path / "metrics.csv") as f:
        lines = list(csv.reader(f))
    assert lines[0][:4] == ["epoch", "steps", "lr", "train_loss"] and len(lines) == 2
    assert (tmp_path / "model.vtc").exists()


def test_train_same_seed_same_csv(tmp_path):
    data = synth_dataset(1, 48, 32)
    for run in ("a", "b"):
        train(TINY.replace(sd_rate=0.2), data, 2, OptimizerConfig(batch_size=16), 7, test=data, out_dir=tmp_path / run)
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_aborts_with_diagnostics():
    m = build_model(TINY, Rng(0))
    m.head["weight"].data[...] = np.inf
    with pytest.raises(TrainingError, match="lr=.*grad-norm"):
        fit(m, synth_dataset(0, 16, 32), 1, OptimizerConfig(batch_size=8), Rng(1))


# -- bench ------------------------------------------------------------------------------

def test_bench_rows_and_schema():
    rep = bench(TINY, ["2x2", "1x4"], ("seq", "par"), [1, 3], repeats=5, warmup=2)
    assert len(rep.rows) == 2 * 2 * 2
    text = rep.to_csv().splitlines()
    assert text[0] == ",".join(CSV_FIELDS)
    assert all(len(line.split(",")) == 6 for line in text[1:])
    assert rep.max_rel_diff <= 1e-5


def test_bench_argument_errors():
    with pytest.raises(ConfigError):
        bench(TINY, ["2x1"], ("par",))
    with pytest.raises(ConfigError):
        bench(TINY, ["2x2"], ("seq",), repeats=3)
    with pytest.raises(ConfigError):
        bench(TINY, ["2x2"], ("fast",))


# -- CLI ----------------------------------------------------------------------------------

def _json_out(tmp_path, argv, name="out.json"):
    out = tmp_path / name
    assert main(argv + ["--out", str(out)]) == 0
    return json.loads(out.read_text())


def test_cli_analyze(tmp_path):
    d = _json_out(tmp_path, ["analyze", "--model", "b", "--layout", "12x1", "--stem", "linear", "--res", "224"])
    assert abs(d["flops_total"] / 17.58e9 - 1) < 0.01 and d["schema_version"] == "1"
    a = _json_out(tmp_path, ["analyze", "--model", "b", "--layout", "12x2"], "a.json")
    b = _json_out(tmp_path, ["analyze", "--model", "b", "--layout", "24x1"], "b.json")
    assert (a["params_total"], a["flops_total"]) == (b["params_total"], b["flops_total"])


def test_cli_masktest(tmp_path):
    d = _json_out(tmp_path, ["masktest", "--stem", "hmlp", "--stem-norm", "ln", "--trials", "20"])
    assert d["independent"] is True and d["commutation_max_deviation"] == 0.0


def test_cli_usage_errors(capsys):
    assert main(["analyze", "--bogus"]) == 1
    assert main(["analyze", "--layout", "3y2"]) == 1
    assert main(["analyze", "--model", "custom"]) == 1
    assert main(["analyze", "--model", "custom", "--width", "10", "--depth", "2", "--heads", "3"]) == 1
    assert main([]) == 1
    assert "usage" in capsys.readouterr().err


def test_cli_exit_codes(tmp_path):
    bad = tmp_path / "broken.vtc"
    bad.write_bytes(b"VTC1" + b"\xff" * 8)
    # a malformed input file is a validation failure, a failed check is a runtime failure
    assert main(["finetune", "--checkpoint", str(bad)]) == 1
    assert main(["gradcheck", "--tol", "0"]) == 2
    assert main(["bench", "--model", "custom", "--width", "16", "--depth", "2", "--heads", "2",
                 "--layout", "2x1", "--exec", "par", "--res", "32"]) == 1


def test_cli_train_finetune_mim(tmp_path):
    common = ["--model", "custom", "--width", "16", "--depth", "2", "--heads", "2", "--res", "32",
              "--n-train", "32", "--n-test", "16", "--epochs", "1", "--batch-size", "16"]
    assert main(["train"] + common + ["--out", str(tmp_path / "t")]) == 0
    rep = json.loads((tmp_path / "t" / "report.json").read_text())
    assert rep["final"]["epoch"] == 1
    ck = str(tmp_path / "t" / "model.vtc")
    assert main(["finetune"] + common[:-8] + ["--res", "64", "--n-train", "16", "--n-test", "16", "--epochs", "1",
                                             "--batch-size", "8", "--tune", "attn", "--checkpoint", ck,
                                             "--out", str(tmp_path / "f")]) == 0
    ft = json.loads((tmp_path / "f" / "report.json").read_text())
    assert ft["params"]["scope"] == "attn" and ft["resolution"] == 64
    assert main(["pretrain-mim"] + common + ["--out", str(tmp_path / "m")]) == 0
    assert (tmp_path / "m" / "mim_metrics.csv").read_text().startswith("epoch,steps,lr,mim_loss")


def test_cli_bench_csv(tmp_path):
    out = tmp_path / "b.csv"
    assert main(["bench", "--model", "custom", "--width", "16", "--depth", "2", "--heads", "2", "--res", "32",
                 "--layout", "2x2", "--batch", "1,2", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "layout,exec,batch,ips,stddev,repeats" and len(lines) == 5


def test_cli_gradcheck(tmp_path):
    d = _json_out(tmp_path, ["gradcheck", "--trials", "1"])
    assert d["passed"] and max(d["max_rel_error"].values()) <= 1e-4
