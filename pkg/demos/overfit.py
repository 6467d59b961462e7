"""Overfit the desk U-Net on four labeled phantoms and report train Dice per class."""
import argparse
import time

import numpy as np

from inpaintssl import datapipe, evalstats, trainer, unet


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--epochs", type=int, default=200)
    ap.add_argument("--lr", type=float, default=1e-2)
    args = ap.parse_args()
    ds = datapipe.make_dataset(datapipe.PhantomSpec())
    ids = ds.splits["train"][:4]
    x, y = ds.inputs[ids], ds.targets[ids]
    model = unet.build(unet.UNetConfig(in_channels=3, out_channels=4))
    t0 = time.time()
    model, hist = trainer.train(model, trainer.TrainData(x, y), trainer.Segment(),
                                trainer.AdamConfig(lr0=args.lr), trainer.LRSchedule(args.lr, decay=1.0),
                                trainer.EarlyStopRule(0.0, 10 ** 6), seed=0, batch_size=1,
                                max_epochs=args.epochs)
    probs = unet.run(model, x).data
    dice = np.mean([evalstats.per_class_dice(probs[i], y[i]) for i in range(len(ids))], axis=0)
    print(f"{len(hist.rows)} epochs in {time.time() - t0:.0f}s, final train loss {hist.rows[-1]['train_loss']:.4f}")
    print("per-class Dice", np.round(dice, 4).tolist(), "mean", round(float(dice.mean()), 4))


if __name__ == "__main__":
    main()
