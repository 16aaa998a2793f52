"""Command-line behavior: exit codes, file outputs, resume equivalence."""

import json

import numpy as np
import pytest

from byteblocks import cli
from byteblocks import evaluation as ev
from byteblocks.checkpoint import load_train_state

CORPUS = """the cat sat on the mat today
a quick brown fox jumps over the dog
plain byte level text with several words
one more short document for sampling
words repeat words repeat words repeat
final line of the little corpus
"""

LABELED = "pos\tgreat fun happy time\nneg\tawful sad bad day\npos\tlovely nice win\nneg\tpoor hurt loss\n"


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "corpus.txt").write_text(CORPUS, encoding="utf-8")
    (root / "labeled.tsv").write_text(LABELED, encoding="utf-8")
    return root


PRETRAIN_FLAGS = ["--preset", "mini", "--batch-size", "2", "--seq-len", "16"]


@pytest.fixture(scope="module")
def pretrained(workdir):
    out = workdir / "run"
    rc = cli.main(["pretrain", "--corpus", str(workdir / "corpus.txt"),
                   "--out", str(out), "--steps", "6", "--checkpoint-every", "2",
                   "--seed", "3", *PRETRAIN_FLAGS])
    assert rc == 0
    return out


@pytest.fixture(scope="module")
def classifier(workdir, pretrained):
    out = workdir / "ft"
    rc = cli.main(["finetune", "--checkpoint", str(pretrained / "ckpt_final.bbck"),
                   "--data", str(workdir / "labeled.tsv"), "--out", str(out),
                   "--steps", "5", "--batch-size", "2", "--seed", "1"])
    assert rc == 0
    return out / "ckpt_finetuned.bbck"


def test_pretrain_writes_log_and_checkpoints(pretrained):
    lines = (pretrained / "train_log.ndjson").read_text().splitlines()
    assert len(lines) == 6
    for i, line in enumerate(lines):
        rec = json.loads(line)
        assert rec["step"] == i
        assert {"loss", "lr_A", "lr_B", "sharpness", "mean_L_B", "mean_L_hat"} <= set(rec)
    for name in ("ckpt_000002.bbck", "ckpt_000004.bbck", "ckpt_000006.bbck", "ckpt_final.bbck"):
        assert (pretrained / name).exists()
    state, _ = load_train_state(pretrained / "ckpt_final.bbck")
    assert state.step == 6


def test_resume_matches_uninterrupted_run(workdir):
    """Picking up a mid-run checkpoint replays the identical trajectory."""
    corpus = str(workdir / "corpus.txt")
    full, resumed = workdir / "full", workdir / "resumed"
    assert cli.main(["pretrain", "--corpus", corpus, "--out", str(full),
                     "--steps", "8", "--checkpoint-every", "4", "--seed", "5",
                     *PRETRAIN_FLAGS]) == 0
    assert cli.main(["pretrain", "--corpus", corpus, "--out", str(resumed),
                     "--steps", "8", "--seed", "5",
                     "--checkpoint", str(full / "ckpt_000004.bbck"),
                     *PRETRAIN_FLAGS]) == 0

    full_lines = (full / "train_log.ndjson").read_text().splitlines()
    resumed_lines = (resumed / "train_log.ndjson").read_text().splitlines()
    assert len(full_lines) == 8 and len(resumed_lines) == 4
    assert full_lines[4:] == resumed_lines

    a, _ = load_train_state(full / "ckpt_final.bbck")
    b, _ = load_train_state(resumed / "ckpt_final.bbck")
    for k in a.params:
        assert a.params[k].data.tobytes() == b.params[k].data.tobytes(), k


def test_pretrain_missing_corpus_exits_3(workdir, capsys):
    rc = cli.main(["pretrain", "--corpus", str(workdir / "nope.txt"),
                   "--out", str(workdir / "x"), "--steps", "2", *PRETRAIN_FLAGS])
    assert rc == 3
    assert "data error" in capsys.readouterr().err


def test_pretrain_empty_corpus_exits_3(workdir, capsys):
    empty = workdir / "empty.txt"
    empty.write_text("\n\n", encoding="utf-8")
    rc = cli.main(["pretrain", "--corpus", str(empty), "--out", str(workdir / "x"),
                   "--steps", "2", *PRETRAIN_FLAGS])
    assert rc == 3


def test_bad_step_count_exits_2(workdir, capsys):
    rc = cli.main(["pretrain", "--corpus", str(workdir / "corpus.txt"),
                   "--out", str(workdir / "x"), "--steps", "0", *PRETRAIN_FLAGS])
    assert rc == 2
    assert "config error" in capsys.readouterr().err


def test_config_file_feeds_defaults_and_flags_override(workdir):
    cfg_path = workdir / "run.json"
    cfg_path.write_text(json.dumps({"preset": "mini", "steps": 3,
                                    "batch_size": 2, "seq_len": 16}))
    out = workdir / "from_config"
    rc = cli.main(["pretrain", "--config", str(cfg_path),
                   "--corpus", str(workdir / "corpus.txt"),
                   "--out", str(out), "--steps", "2"])
    assert rc == 0
    assert len((out / "train_log.ndjson").read_text().splitlines()) == 2


def test_unknown_config_key_exits_2(workdir, capsys):
    bad = workdir / "bad.json"
    bad.write_text('{"stepz": 3}')
    rc = cli.main(["pretrain", "--config", str(bad),
                   "--corpus", str(workdir / "corpus.txt"), "--out", str(workdir / "x")])
    assert rc == 2
    assert "stepz" in capsys.readouterr().err


def test_malformed_config_json_exits_2(workdir):
    bad = workdir / "broken.json"
    bad.write_text("{not json")
    rc = cli.main(["pretrain", "--config", str(bad),
                   "--corpus", str(workdir / "corpus.txt"), "--out", str(workdir / "x")])
    assert rc == 2


def test_segment_prints_blocks(pretrained, capsys):
    rc = cli.main(["segment", "--checkpoint", str(pretrained / "ckpt_final.bbck"),
                   "--text", "apple pie"])
    assert rc == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0].startswith("blocks: ")
    n = int(out[0].split()[1])
    assert n >= 1
    assert out[1].count("|") == n - 1
    assert out[1].replace("|", "") == "apple pie"


def test_segment_single_byte_is_one_block(pretrained, capsys):
    rc = cli.main(["segment", "--checkpoint", str(pretrained / "ckpt_final.bbck"),
                   "--text", "a"])
    assert rc == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "blocks: 1"
    assert out[1] == "a"


def test_segment_show_probs(pretrained, capsys):
    rc = cli.main(["segment", "--checkpoint", str(pretrained / "ckpt_final.bbck"),
                   "--text", "abcd", "--show-probs"])
    assert rc == 0
    out = capsys.readouterr().out.splitlines()
    probs = [float(x) for x in out[2].split()[1:]]
    assert len(probs) == 4
    assert all(0.0 < p < 1.0 for p in probs)


def test_segment_garbage_checkpoint_exits_3(workdir, capsys):
    junk = workdir / "junk.bbck"
    junk.write_bytes(b"not a checkpoint at all")
    rc = cli.main(["segment", "--checkpoint", str(junk), "--text", "hi"])
    assert rc == 3


def test_inspect_map_writes_csv_and_pgm(pretrained, workdir, capsys):
    out = workdir / "maps"
    text = "apple pie"
    rc = cli.main(["inspect-map", "--checkpoint", str(pretrained / "ckpt_final.bbck"),
                   "--text", text, "--out", str(out)])
    assert rc == 0
    stdout = capsys.readouterr().out
    assert "mean column entropy:" in stdout

    rows = (out / "assignment.csv").read_text().splitlines()
    header = rows[0].split(",")
    assert header == [f"b{i}" for i in range(len(text.encode()))]
    data = np.array([[float(v) for v in row.split(",")] for row in rows[1:]])
    assert data.shape[1] == len(text.encode())
    np.testing.assert_allclose(data.sum(axis=0), 1.0, atol=1e-4)

    pgm = (out / "assignment.pgm").read_bytes()
    assert pgm.startswith(b"P5\n")
    dims = pgm.split(b"\n", 3)
    assert dims[1].split() == [str(data.shape[1]).encode(), str(data.shape[0]).encode()]


def test_eval_noise_table_and_zero_tau_matches_clean(classifier, workdir, capsys):
    rc = cli.main(["eval-noise", "--checkpoint", str(classifier),
                   "--data", str(workdir / "labeled.tsv"),
                   "--tau", "0,0.25", "--seed", "7"])
    assert rc == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "tau\taccuracy"
    assert len(out) == 3
    state, cfg = load_train_state(classifier)
    pairs = ev.pairs_to_ids(ev.load_labeled(workdir / "labeled.tsv"))
    clean = ev.evaluate_classifier(state.params, cfg, pairs)
    assert float(out[1].split("\t")[1]) == pytest.approx(clean, abs=1e-4)


def test_eval_noise_default_taus_and_determinism(classifier, workdir, capsys):
    args = ["eval-noise", "--checkpoint", str(classifier),
            "--data", str(workdir / "labeled.tsv"), "--seed", "9"]
    assert cli.main(args) == 0
    first = capsys.readouterr().out
    assert cli.main(args) == 0
    second = capsys.readouterr().out
    assert first == second
    body = first.splitlines()[1:]
    assert [row.split("\t")[0] for row in body] == ["0.05", "0.1", "0.15"]


def test_eval_noise_writes_csv(classifier, workdir, capsys):
    table = workdir / "noise.csv"
    rc = cli.main(["eval-noise", "--checkpoint", str(classifier),
                   "--data", str(workdir / "labeled.tsv"),
                   "--tau", "0", "--out", str(table)])
    assert rc == 0
    capsys.readouterr()
    rows = table.read_text().splitlines()
    assert rows[0] == "tau,accuracy"
    assert len(rows) == 2


def test_eval_noise_missing_labels_exits_3(classifier, workdir, capsys):
    bad = workdir / "nolabels.tsv"
    bad.write_text("just text without any tab\n", encoding="utf-8")
    rc = cli.main(["eval-noise", "--checkpoint", str(classifier), "--data", str(bad)])
    assert rc == 3


def test_eval_noise_train_dev_needs_train_data(classifier, workdir, capsys):
    rc = cli.main(["eval-noise", "--checkpoint", str(classifier),
                   "--data", str(workdir / "labeled.tsv"), "--train-dev"])
    assert rc == 2


def test_eval_noise_train_dev_runs(classifier, workdir, capsys):
    rc = cli.main(["eval-noise", "--checkpoint", str(classifier),
                   "--data", str(workdir / "labeled.tsv"),
                   "--train-dev", "--train-data", str(workdir / "labeled.tsv"),
                   "--finetune-steps", "3", "--tau", "0.1", "--seed", "2"])
    assert rc == 0
    out = capsys.readouterr().out.splitlines()
    assert len(out) == 2


def test_finetune_reports_accuracy(classifier, capsys):
    # fixture already ran the command; do a fresh run to capture stdout
    assert classifier.exists()
    state, _ = load_train_state(classifier)
    assert state.step == 5
