"""Train the feature field and flow net on the pinned translating-texture scene and report flow errors.

Usage: python3 scripts/run_flow_experiment.py [--out DIR] [--f3-steps N] [--flow-steps N]

Writes metrics.json, f3_losses.csv and the feature-field and flow
checkpoints (loadable by `f3 flow-eval`) into --out.
"""
import argparse
import dataclasses
import json
from pathlib import Path

import numpy as np

from f3.acceptance import EndToEndConfig, evaluate_end_to_end, train_end_to_end
from f3.checkpoint import Checkpoint, module_sections, save_checkpoint
from f3.train import to_checkpoint


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/flow")
    ap.add_argument("--f3-steps", type=int, default=EndToEndConfig.f3_steps)
    ap.add_argument("--flow-steps", type=int, default=EndToEndConfig.flow_steps)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    cfg = EndToEndConfig(f3_steps=args.f3_steps, flow_steps=args.flow_steps)
    art = train_end_to_end(cfg)
    metrics = evaluate_end_to_end(art)
    metrics["seconds"] = art.seconds
    metrics["config"] = dataclasses.asdict(cfg)
    np.savetxt(out / "f3_losses.csv", np.array(art.f3_losses), header="focal_loss", comments="")
    save_checkpoint(out / "f3.f3ck", to_checkpoint(art.model, art.head, art.train_config))
    flow_config = {"flow": dataclasses.asdict(art.flow_config), "channels": art.model.smoother_config.channels,
                   "dt_us": cfg.dt_us, "bin_us": cfg.bin_us}
    save_checkpoint(out / "flow.f3ck", Checkpoint(flow_config, module_sections(art.flow_net, "flow.")))
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, default=str) + "\n")
    print(f"AEE {metrics['aee']:.4f} px  3PE {metrics['three_pe']:.4f}  "
          f"over {metrics['windows']} held-out windows (ground truth {metrics['gt_displacement_px']:.1f} px)")


if __name__ == "__main__":
    main()
