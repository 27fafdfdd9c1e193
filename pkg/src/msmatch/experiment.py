"""Desk-scale end-to-end run on synthetic pairs: synth -> label -> train -> eval.

Everything goes through the CLI so the run exercises the same code paths a
user would.  Returns the trained and untrained-baseline reports.
"""
import json
import time
from pathlib import Path

from .cli import main
from .config import experiment_config, save_config


def _run(argv):
    code = main([str(a) for a in argv])
    if code != 0:
        raise RuntimeError(f"command failed with exit code {code}: {' '.join(map(str, argv))}")


def run_synthetic_experiment(workdir, cfg=None, n_train=48, n_eval=16, dims=(128, 128), workers=1):
    work = Path(workdir)
    work.mkdir(parents=True, exist_ok=True)
    cfg = cfg or experiment_config()
    cfg_path = work / "run_config.json"
    save_config(cfg, cfg_path)
    h, w = dims
    common = ["--config", cfg_path, "--seed", cfg.seed]
    times = {}

    t = time.perf_counter()
    _run(["synth", *common, "--out", work / "train", "--n-pairs", n_train, "--height", h, "--width", w])
    _run(["synth", *common, "--out", work / "eval", "--n-pairs", n_eval, "--start", n_train,
          "--height", h, "--width", w])
    times["synth"] = time.perf_counter() - t

    t = time.perf_counter()
    _run(["label", *common, "--workers", workers, "--out", work / "label", work / "train"])
    times["label"] = time.perf_counter() - t

    t = time.perf_counter()
    _run(["train", *common, "--out", work / "model", "--labels", work / "label" / "labels", work / "train"])
    times["train"] = time.perf_counter() - t

    t = time.perf_counter()
    _run(["eval", *common, "--out", work / "eval_trained", "--checkpoint", work / "model" / "checkpoint.pt",
          work / "eval"])
    _run(["eval", *common, "--out", work / "eval_untrained", "--untrained", work / "eval"])
    times["eval"] = time.perf_counter() - t

    trained = json.loads((work / "eval_trained" / "report.json").read_text())
    untrained = json.loads((work / "eval_untrained" / "report.json").read_text())
    summary = {
        "trained": _headline(trained),
        "untrained": _headline(untrained),
        "label_summary": json.loads((work / "label" / "summary.json").read_text()),
        "seconds": times,
        "total_seconds": sum(times.values()),
    }
    (work / "experiment_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def _headline(report):
    eps = report["epsilons"]
    acc = report["mean_corner_accuracy"]
    return {
        "repeatability": report["mean_repeatability"],
        "matching_score": report["mean_matching_score"],
        "corner_accuracy_at_3": acc[eps.index(3.0)],
        "corner_accuracy_at_5": acc[eps.index(5.0)],
        "mean_keypoints": report["mean_keypoints"],
    }
