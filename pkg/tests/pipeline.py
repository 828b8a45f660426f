"""Run the whole CLI pipeline on a tiny configuration (shared by CLI and acceptance tests)."""
from pathlib import Path

from pcomplete.cli import main

TINY = """\
model.encoder_widths1 = [16, 32]
model.encoder_widths2 = [32]
model.code_dim = 32
model.decoder_widths = [64]
model.coarse_points = 32
model.refiner_widths = [32, 16]
train.batch_size = 2
train.max_steps = 6
train.lr = 0.001
train.checkpoint_every = 3
"""


def run(argv):
    code = main([str(a) for a in argv])
    if code != 0:
        raise RuntimeError(f"pcomplete {' '.join(map(str, argv))} exited {code}")


def run_pipeline(root: Path, seed: int = 0) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY)
    run(["datagen", "--shapes", 16, "--points", 64, "--seed", seed, "--out", root / "data"])
    run(["train", "--stage", 1, "--data", root / "data", "--config", cfg, "--out", root / "s1",
         "--set", f"train.seed={seed}"])
    run(["train", "--stage", 2, "--data", root / "data", "--init", root / "s1" / "stage1.ckpt",
         "--config", cfg, "--out", root / "s2"])
    run(["train", "--stage", 3, "--data", root / "data", "--init", root / "s2" / "stage2.ckpt",
         "--config", cfg, "--out", root / "s3"])
    for metric in ("cdp", "cdt", "fidelity", "consistency", "sweep"):
        run(["eval", "--ckpt", root / "s3" / "stage3.ckpt", "--dataset", root / "data",
             "--metric", metric, "--out", root / "reports" / f"{metric}.csv"])
    return root


def tree_bytes(root: Path) -> dict:
    """Relative path -> bytes for every file under ``root`` (except the config we wrote)."""
    root = Path(root)
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}
