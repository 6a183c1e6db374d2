"""A small end-to-end experiment: the accuracy-robustness trade-off.

Runs the full per-epoch loop (train, evaluate, attack, measure) at desk
scale and renders the two summary plots.  As the classifier sharpens its
decision boundary, dx falls while dp rises: the conjugate-pair trade-off
that mirrors falling robust accuracy.

Run:  python demos/04_experiment.py   (a few minutes on one core)
"""

from pathlib import Path

from packetlab import attacks, nn, runner, synthdata, uncertainty

DATA = Path("demo-data/digits")

if not (DATA / "train-images-idx3-ubyte").exists():
    synthdata.make_digits_dataset(DATA, n_train=4000, n_test=800, seed=0)

cfg = runner.ExperimentConfig(
    data_dir=str(DATA), model="cnn3-mnist", epochs=6, stride=1,
    train_size=3000, test_size=800, eval_subset=400, n_dims=12,
    outdir="demo-data/run", seed=0,
    train=nn.TrainConfig(lr=0.05, batch_size=64),
    attack=attacks.AttackConfig(kind="pgd", epsilon=0.1, alpha=0.025,
                                steps=4),
    quad=uncertainty.QuadratureConfig(n=1024))

print("epoch  loss   clean  robust  dx      dp")
for rec in runner.run_experiment(cfg):
    print(f"{rec.epoch:>5}  {rec.train_loss:5.3f}  {rec.clean_acc:.3f}  "
          f"{rec.robust_acc:.3f}   {rec.dx:.4f}  {rec.dp:.3f}")

acc, unc = runner.emit_plots(Path(cfg.outdir) / "results.csv")
print(f"\nplots: {acc}  {unc}")
print(f"full record: {cfg.outdir}/results.csv, run-manifest.txt, model.upkt")
