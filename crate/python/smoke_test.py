"""Build the extension module, import it, and exercise a short pipeline."""

import importlib.util
import json
import shutil
import subprocess
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def load_module(workdir: Path):
    subprocess.run(
        ["cargo", "build", "-p", "uniperc-py", "--features", "extension-module", "--release"],
        cwd=ROOT,
        check=True,
    )
    lib = ROOT / "target" / "release"
    built = next(p for p in (lib / "libuniperc_py.so", lib / "libuniperc_py.dylib") if p.exists())
    target = workdir / "uniperc_py.so"
    shutil.copy(built, target)
    spec = importlib.util.spec_from_file_location("uniperc_py", target)
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    return module


def main() -> int:
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        up = load_module(tmp)

        assert abs(up.delta_mtl([110.0, 50.0], [100.0, 50.0]) - 5.0) < 1e-12
        assert abs(up.miou([[0, 1], [1, 1]], [[0, 1], [1, 1]], 2) - 100.0) < 1e-9
        weights, norm_sq = up.min_norm_point([[1.0, 0.0], [0.0, 2.0]])
        print(f"min-norm weights {weights} norm^2 {norm_sq:.4f}")

        cfg = up.Config("desk", seed=0).update(
            json.dumps(
                {
                    "data": {"train_samples": 16, "eval_samples": 4},
                    "prompting": {"n": [1, 1, 1, 1]},
                    "train": {"steps": 4, "batch_size": 4, "checkpoint_every": 2},
                    "eval": {"batch_size": 4},
                }
            )
        )
        cfg.out_dir = str(tmp / "run")
        print(cfg)
        up.gen_data(cfg)
        print("prompt banks", up.build_prompts(cfg))
        summary = up.train(cfg)
        print("losses", [round(x, 3) for x in summary["losses"]])
        metrics = up.evaluate(cfg)
        print("metrics", {k: v for k, v in metrics.items() if k != "config_hash"})
        ok = sum(ok for _, ok in up.reproduce_tables())
        print(f"published rows consistent: {ok}/{len(up.reproduce_tables())}")
    print("smoke test ok")
    return 0


if __name__ == "__main__":
    sys.exit(main())
