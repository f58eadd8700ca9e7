#!/usr/bin/env python3
"""End-to-end demo: generate scenes, train the flow, evaluate.

Small by default so it finishes in a couple of minutes on a laptop;
raise --n-scenes / epochs for a real run.
"""

import argparse
import json
import os

from flowpose import body, checkpoint, metrics, synth, training


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--n-scenes", type=int, default=64)
    p.add_argument("--phase1-epochs", type=int, default=20)
    p.add_argument("--phase2-epochs", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-eval-samples", type=int, default=20)
    p.add_argument("--out", default="run")
    args = p.parse_args()
    os.makedirs(args.out, exist_ok=True)

    model = body.make_toy_model()
    dataset = synth.gen_dataset(model, args.n_scenes, synth.standard_rig(1),
                                synth.NoiseSpec(pixel_scale=1.0), args.seed)

    cfg = training.TrainConfig(phase1_epochs=args.phase1_epochs,
                               phase2_epochs=args.phase2_epochs,
                               seed=args.seed)
    flow, extra, log = training.train(model, dataset, cfg)
    checkpoint.save_checkpoint(os.path.join(args.out, "checkpoint.json"),
                               flow, extra, cfg)
    with open(os.path.join(args.out, "train_log.csv"), "w") as f:
        f.write(training.log_to_csv(log))
    print("final epoch:", {k: round(v, 4) for k, v in log[-1].items()
                           if isinstance(v, float)})

    encode = training.make_encoder(extra, cfg.blocks)
    report = metrics.evaluate(flow, encode, model, dataset,
                              n_samples=args.n_eval_samples,
                              rng_seed=args.seed)
    with open(os.path.join(args.out, "metrics.json"), "w") as f:
        json.dump(report, f, indent=1)
    print(json.dumps(report["summary"], indent=1))


if __name__ == "__main__":
    main()
