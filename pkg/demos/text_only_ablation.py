"""Train on the text-only task with and without the language branch.

Support images in this task all look alike, so the only route to the right
category is the description.  Expect the full model well above chance and
the vision-only model at chance.  Takes a few minutes on one CPU.
"""

import sys
from pathlib import Path

from mmfsod.config import load_config
from mmfsod.training import train

preset = Path(__file__).resolve().parents[1] / "configs" / "acceptance.cfg"
seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0

for label, flags in (("full", {}), ("no language", {"no_language": True}),
                     ("decoupled attention", {"decoupled_attention": True})):
    cfg = load_config(preset, {"separability": "text_only_separable", "seed": seed, **flags})
    _, records = train(cfg)
    final = records[-1]
    print(f"{label:20s} accuracy {final['acc']:.3f}  mAP {final['map']:.3f}")
print(f"chance {1 / cfg.n:.3f}")
