"""Look at where the soft branch attends.

Each stage produces K foreground maps and one background map that sum to
one at every pixel. After a short training run the foreground maps tend to
split the body between them. Heatmaps and overlays are written as PNGs.

    python demos/attention_heatmaps.py [output_dir]
"""

import sys
from pathlib import Path

from mdpr.config import from_dict
from mdpr.data import generate_synthetic_dataset
from mdpr.engine import run_training
from mdpr.visualize import attention_maps, export_attention

out = Path(sys.argv[1] if len(sys.argv) > 1 else "runs/attention_demo")

cfg = from_dict(
    {
        "image_size": [128, 64],
        "backbone": {"widths": [16, 32, 64, 64, 128]},
        "embedding_size": 64,
        "sampler": {"P": 4, "S": 4},
        "optim": {"epochs": 10, "warmup_iters": 20, "base_lr": 1e-3},
        "output_dir": str(out),
    }
)
model = run_training(cfg).build_model()

samples = generate_synthetic_dataset(3, 2, cfg.image_size, seed=7)[::2]
for rec in samples:
    maps = attention_maps(model, rec.pixels)
    for stage, stack in maps.items():
        share = stack.reshape(len(stack), -1).mean(axis=1)
        labels = [f"A{stage}_{k + 1}" for k in range(len(stack) - 1)] + [f"A{stage}_bg"]
        print(f"id {rec.identity}: " + "  ".join(f"{n}={s:.2f}" for n, s in zip(labels, share)))
    export_attention(model, rec.pixels, out / "heatmaps", f"id{rec.identity}")

print(f"heatmaps written to {out / 'heatmaps'}")
