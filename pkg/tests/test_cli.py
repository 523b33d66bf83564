import io
import json
import socket
import subprocess
import sys
import threading
import time

import numpy as np
import pytest

from fusionfraud import cli, data, serve
from fusionfraud.model import ModelDims, Variant, init_params, load_params, save_params

TINY = ModelDims(feature_dim=96, embed_hidden=16, video_out=8, audio_out=4, head_hidden=16)


def run_cli(argv):
    out, err = io.StringIO(), io.StringIO()
    code = cli.main(argv, out=out, err=err)
    return code, out.getvalue(), err.getvalue()


@pytest.fixture(scope="module")
def tiny_checkpoint(tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt") / "tiny.tfnm"
    params = init_params(Variant.TF_COMPLETE, 5, TINY)
    save_params(params, path)
    return path


@pytest.fixture(scope="module")
def zero_full_checkpoint(tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt") / "zero-full.tfnm"
    params = init_params(Variant.TF_COMPLETE, 5)
    for _, t in params.named_tensors():
        t[:] = 0.0
    save_params(params, path)
    return path


@pytest.fixture(scope="module")
def small_dataset_file(tmp_path_factory, small_dataset):
    path = tmp_path_factory.mktemp("data") / "small.tfnd"
    data.save_dataset(small_dataset, path, format="binary")
    return path


def record_line(feature_dim=768, ident="r1", fill=0.1):
    return json.dumps({"id": ident, "video": [fill] * feature_dim,
                       "audio": [fill] * feature_dim})


class TestGenData:
    def test_small_generation_with_counts_and_ceiling(self, tmp_path):
        out_path = tmp_path / "ds.jsonl"
        code, out, err = run_cli([
            "gen-data", "--n-total", "10", "--n-fraud", "5", "--format", "jsonl",
            "--out", str(out_path), "--out-dir", str(tmp_path), "--seed", "3"])
        assert code == 0, err
        assert "10 records" in out and "fraud=5" in out
        assert "bayes ceiling" in out
        ds = data.load_dataset(out_path)
        assert len(ds) == 10 and int(ds.labels().sum()) == 5
        assert (tmp_path / "resolved-config.txt").exists()

    def test_invalid_quota_exits_one(self, tmp_path):
        code, _, err = run_cli(["gen-data", "--n-total", "10", "--n-fraud", "0",
                                "--out-dir", str(tmp_path)])
        assert code == 1
        assert "n_fraud" in err

    def test_config_file_supplies_values_flags_override(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("n_total = 12\nn_fraud = 6\nformat = jsonl\nseed = 4\n")
        out_path = tmp_path / "ds.jsonl"
        code, out, _ = run_cli(["gen-data", "--config", str(cfg), "--n-fraud", "3",
                                "--out", str(out_path), "--out-dir", str(tmp_path)])
        assert code == 0
        ds = data.load_dataset(out_path)
        assert len(ds) == 12 and int(ds.labels().sum()) == 3  # flag beat the file

    def test_unknown_config_key_rejected(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("n_totall = 12\n")
        code, _, err = run_cli(["gen-data", "--config", str(cfg), "--out-dir", str(tmp_path)])
        assert code == 1 and "n_totall" in err


class TestTrain:
    def test_artifacts_written(self, small_dataset_file, tmp_path):
        out_dir = tmp_path / "run"
        code, out, err = run_cli([
            "train", "--data", str(small_dataset_file), "--variant", "video-only",
            "--folds", "3", "--max-epochs", "2", "--patience", "5",
            "--batch-size", "16", "--seed", "9", "--out-dir", str(out_dir)])
        assert code == 0, err
        for fold in range(3):
            assert (out_dir / f"checkpoint-fold{fold}.tfnm").exists()
            csv = (out_dir / f"history-fold{fold}.csv").read_text()
            assert csv.startswith("epoch,lr,train_loss,val_loss,")
        assert (out_dir / "report.json").exists()
        assert (out_dir / "training-curves.png").exists()
        assert (out_dir / "confusion-matrix.png").exists()
        assert (out_dir / "resolved-config.txt").exists()
        loaded = load_params(out_dir / "checkpoint-fold0.tfnm")
        assert loaded.variant is Variant.VIDEO_ONLY

    def test_same_seed_identical_report_json(self, small_dataset_file, tmp_path):
        args = ["train", "--data", str(small_dataset_file), "--variant", "audio-only",
                "--folds", "3", "--max-epochs", "2", "--patience", "5",
                "--batch-size", "16", "--seed", "11"]
        d1, d2 = tmp_path / "a", tmp_path / "b"
        assert run_cli(args + ["--out-dir", str(d1)])[0] == 0
        assert run_cli(args + ["--out-dir", str(d2)])[0] == 0
        assert (d1 / "report.json").read_bytes() == (d2 / "report.json").read_bytes()

    def test_unknown_variant_lists_the_eight_names(self, small_dataset_file, tmp_path):
        code, _, err = run_cli(["train", "--data", str(small_dataset_file),
                                "--variant", "mega-fusion", "--out-dir", str(tmp_path)])
        assert code == 1
        for v in Variant:
            assert v.cli_name in err

    def test_missing_data_file_is_io_error(self, tmp_path):
        code, _, err = run_cli(["train", "--data", str(tmp_path / "nope.tfnd"),
                                "--variant", "video-only", "--out-dir", str(tmp_path)])
        assert code == 3

    def test_variant_can_come_from_config_file(self, small_dataset_file, tmp_path):
        cfg = tmp_path / "train.cfg"
        cfg.write_text(f"data = {small_dataset_file}\nvariant = audio-only\n"
                       "folds = 3\nmax_epochs = 1\nbatch_size = 32\nseed = 2\n")
        out_dir = tmp_path / "run"
        code, _, err = run_cli(["train", "--config", str(cfg), "--out-dir", str(out_dir)])
        assert code == 0, err
        assert load_params(out_dir / "checkpoint-fold0.tfnm").variant is Variant.AUDIO_ONLY

    def test_missing_variant_everywhere_is_usage_error(self, small_dataset_file, tmp_path):
        code, _, err = run_cli(["train", "--data", str(small_dataset_file),
                                "--out-dir", str(tmp_path)])
        assert code == 1 and "variant" in err


class TestAblate:
    def test_two_variant_table_and_artifacts(self, small_dataset_file, tmp_path):
        out_dir = tmp_path / "ab"
        code, out, err = run_cli([
            "ablate", "--data", str(small_dataset_file), "--variants",
            "video-only,audio-only", "--folds", "3", "--max-epochs", "2",
            "--patience", "5", "--batch-size", "16", "--seed", "13",
            "--out-dir", str(out_dir)])
        assert code == 0, err
        table = (out_dir / "ablation.txt").read_text()
        assert len(table.splitlines()) == 4  # header + rule + 2 rows
        assert "Video Only" in out
        assert (out_dir / "ablation.json").exists()
        assert (out_dir / "ablation.csv").exists()
        assert (out_dir / "ablation-f1.png").exists()
        doc = json.loads((out_dir / "ablation.json").read_text())
        assert [r["variant"] for r in doc["rows"]] == ["video-only", "audio-only"]

    def test_all_variants_gives_eight_rows_in_canonical_order(self, small_dataset_file, tmp_path):
        out_dir = tmp_path / "ab8"
        code, _, err = run_cli([
            "ablate", "--data", str(small_dataset_file), "--variants", "all",
            "--folds", "3", "--max-epochs", "1", "--patience", "5",
            "--batch-size", "32", "--seed", "15", "--out-dir", str(out_dir)])
        assert code == 0, err
        doc = json.loads((out_dir / "ablation.json").read_text())
        assert [r["variant"] for r in doc["rows"]] == [v.cli_name for v in Variant]
        assert len((out_dir / "ablation.txt").read_text().splitlines()) == 10

    def test_resolved_config_round_trips(self, small_dataset_file, tmp_path):
        out1 = tmp_path / "r1"
        args = ["ablate", "--data", str(small_dataset_file), "--variants", "video-only",
                "--folds", "3", "--max-epochs", "2", "--patience", "5",
                "--batch-size", "16", "--seed", "17", "--out-dir", str(out1)]
        assert run_cli(args)[0] == 0
        # re-run purely from the echoed config, into a second directory
        out2 = tmp_path / "r2"
        code, _, err = run_cli(["ablate", "--config", str(out1 / "resolved-config.txt"),
                                "--out-dir", str(out2)])
        assert code == 0, err
        assert (out1 / "ablation.json").read_bytes() == (out2 / "ablation.json").read_bytes()


class TestInfer:
    def test_zero_checkpoint_gives_half_and_fraud_at_boundary(self, zero_full_checkpoint, tmp_path):
        inp = tmp_path / "records.jsonl"
        inp.write_text(record_line() + "\n" + record_line(ident="r2", fill=-0.3) + "\n")
        code, out, err = run_cli(["infer", "--checkpoint", str(zero_full_checkpoint),
                                  "--input", str(inp)])
        assert code == 0, err
        lines = [json.loads(l) for l in out.splitlines()]
        assert [r["id"] for r in lines] == ["r1", "r2"]
        assert all(r["probability"] == 0.5 for r in lines)
        assert all(r["label"] == "fraud" for r in lines)  # p >= threshold rule
        assert all(r["elapsed_ms"] >= 0 for r in lines)

    def test_same_record_twice_same_probability(self, tiny_checkpoint, tmp_path):
        inp = tmp_path / "r.jsonl"
        inp.write_text(record_line(96) + "\n" + record_line(96) + "\n")
        code, out, _ = run_cli(["infer", "--checkpoint", str(tiny_checkpoint),
                                "--input", str(inp)])
        assert code == 0
        a, b = [json.loads(l)["probability"] for l in out.splitlines()]
        assert a == b

    def test_bad_line_reported_and_rest_processed(self, tiny_checkpoint, tmp_path):
        inp = tmp_path / "r.jsonl"
        bad = json.dumps({"id": "bad", "video": [0.0] * 95, "audio": [0.0] * 96})
        inp.write_text(record_line(96, "ok1") + "\n" + bad + "\n" + record_line(96, "ok2") + "\n")
        code, out, err = run_cli(["infer", "--checkpoint", str(tiny_checkpoint),
                                  "--input", str(inp)])
        assert code == 1
        ids = [json.loads(l)["id"] for l in out.splitlines()]
        assert ids == ["ok1", "ok2"]
        assert "line 2" in err and "95" in err

    def test_threshold_flag_moves_decision(self, tiny_checkpoint, tmp_path):
        inp = tmp_path / "r.jsonl"
        inp.write_text(record_line(96) + "\n")
        _, out_low, _ = run_cli(["infer", "--checkpoint", str(tiny_checkpoint),
                                 "--input", str(inp), "--threshold", "0.01"])
        _, out_high, _ = run_cli(["infer", "--checkpoint", str(tiny_checkpoint),
                                  "--input", str(inp), "--threshold", "0.99"])
        assert json.loads(out_low)["label"] == "fraud"
        assert json.loads(out_high)["label"] == "legit"


class TestServeStdio:
    def test_thousand_ordered_responses_and_summary(self, tiny_checkpoint):
        params = load_params(tiny_checkpoint)
        lines = [record_line(96, ident=f"q{i}") for i in range(1000)]
        stdin = io.StringIO("\n".join(lines) + "\n\n\n")  # trailing empties ignored
        stdout, stderr = io.StringIO(), io.StringIO()
        code = serve.serve_stdio(params, 0.5, stdin, stdout, stderr)
        assert code == 0
        responses = stdout.getvalue().splitlines()
        assert len(responses) == 1000
        assert [json.loads(r)["id"] for r in responses] == [f"q{i}" for i in range(1000)]
        summary = json.loads(stderr.getvalue())
        assert summary["event"] == "latency_summary"
        assert summary["count"] == 1000
        for block in ("model_ms", "total_ms"):
            s = summary[block]
            assert 0 <= s["p50"] <= s["p95"] <= s["max"]

    def test_malformed_request_keeps_stream_alive(self, tiny_checkpoint):
        params = load_params(tiny_checkpoint)
        stdin = io.StringIO("not json\n" + record_line(96, "after") + "\n")
        stdout, stderr = io.StringIO(), io.StringIO()
        serve.serve_stdio(params, 0.5, stdin, stdout, stderr)
        lines = stdout.getvalue().splitlines()
        assert len(lines) == 2
        assert "error" in json.loads(lines[0])
        assert json.loads(lines[1])["id"] == "after"
        assert json.loads(stderr.getvalue())["count"] == 1  # only the good one timed


class TestServeTcp:
    def test_round_trip_order_and_errors_over_socket(self, tiny_checkpoint):
        params = load_params(tiny_checkpoint)
        stderr = io.StringIO()
        holder = {}
        ready = threading.Event()

        def cb(server, port):
            holder["server"] = server
            holder["port"] = port
            ready.set()

        t = threading.Thread(target=serve.serve_tcp,
                             args=(params, 0.5, 0, stderr, cb), daemon=True)
        t.start()
        assert ready.wait(5.0)
        with socket.create_connection(("127.0.0.1", holder["port"]), timeout=5) as sock:
            payload = (record_line(96, "a") + "\n" + "garbage\n" + record_line(96, "b") + "\n")
            sock.sendall(payload.encode())
            sock.shutdown(socket.SHUT_WR)
            got = b""
            while True:
                chunk = sock.recv(65536)
                if not chunk:
                    break
                got += chunk
        lines = got.decode().splitlines()
        assert len(lines) == 3
        assert json.loads(lines[0])["id"] == "a"
        assert "error" in json.loads(lines[1])
        assert json.loads(lines[2])["id"] == "b"
        holder["server"].shutdown()
        t.join(timeout=5)
        assert not t.is_alive()

    def test_bad_transport_rejected(self, tiny_checkpoint, tmp_path):
        code, _, err = run_cli(["serve", "--checkpoint", str(tiny_checkpoint),
                                "--transport", "udp:99"])
        assert code == 1 and "transport" in err


class TestGradcheckCommand:
    def test_all_variants_pass_and_are_listed(self):
        code, out, _ = run_cli(["gradcheck", "--seed", "0"])
        assert code == 0
        for v in Variant:
            assert v.cli_name in out
        assert out.count("PASS") == 8
        assert "FAIL" not in out

    def test_corrupted_backward_fails_nonzero(self):
        code, out, err = run_cli(["gradcheck", "--seed", "0", "--corrupt-backward"])
        assert code == 2
        assert "FAIL" in out


class TestUsage:
    def test_no_subcommand_is_usage_error(self):
        code, _, err = run_cli([])
        assert code == 1

    def test_console_script_entry_point(self, tmp_path):
        # one subprocess smoke test through the installed script
        proc = subprocess.run(
            [sys.executable, "-m", "fusionfraud.cli", "gen-data", "--n-total", "8",
             "--n-fraud", "4", "--format", "jsonl", "--out", str(tmp_path / "d.jsonl"),
             "--out-dir", str(tmp_path)],
            capture_output=True, text=True, timeout=120)
        assert proc.returncode == 0, proc.stderr
        assert "8 records" in proc.stdout

    def test_serve_stdio_subprocess_end_to_end(self, tiny_checkpoint, tmp_path):
        reqs = "\n".join(record_line(96, f"s{i}") for i in range(5)) + "\n"
        proc = subprocess.run(
            [sys.executable, "-m", "fusionfraud.cli", "serve",
             "--checkpoint", str(tiny_checkpoint), "--transport", "stdio"],
            input=reqs, capture_output=True, text=True, timeout=120)
        assert proc.returncode == 0, proc.stderr
        assert len(proc.stdout.splitlines()) == 5
        summary = json.loads(proc.stderr.splitlines()[-1])
        assert summary["count"] == 5
