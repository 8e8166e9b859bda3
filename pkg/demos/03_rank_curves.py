"""
Ranking partially observed curves
=================================

End-to-end walk through the pipeline at a small scale: synthesize a dataset
of streaming loss curves, look at how often the naive call (compare the
latest observed values) agrees with the final outcome, then train the
difference ranker on one fold and compare.

The synthetic curves hide the ranking signal on purpose: some models pick up
a late loss ramp that the early curve does not show, but a hyperparameter
correlated with the ramp is visible from the start.  A model that reads the
metadata can anticipate the reversal; the greedy call cannot.
"""

import numpy as np

from necurve import (
    GeneratorConfig,
    TrainConfig,
    consistency_analysis,
    evaluate,
    evaluate_greedy,
    generate_dataset,
    grouped_kfold,
    train,
)

# a dozen training jobs, eight models each, resampled to 50-point curves
config = GeneratorConfig(
    jobs=12,
    models_per_job=8,
    curve_length_mean=80.0,
    curve_length_sd=30.0,
    examples_per_checkpoint=20,
    resample_length=50,
    seed=11,
)
records = generate_dataset(config)
print(f"dataset: {len(records)} models across {config.jobs} jobs")

# how consistent is "lower right now" with "lower at the end"?
print("\ngreedy agreement with the final windowed outcome:")
for point in consistency_analysis(records, "wne", (0.2, 0.4, 0.6, 0.8, 1.0)):
    bar = "#" * int(40 * point["accuracy"])
    print(f"  {point['fraction']:.1f} observed: {point['accuracy']:.3f} {bar}")
print("even at full observation the agreement stays below 1.0: whenever the")
print("lifetime mean and the recent window disagree, the last curve value")
print("points at the wrong winner.")

# train the difference ranker on fold 0 and score the held-out jobs
splits = grouped_kfold(records, k=4, seed=11)
train_config = TrainConfig(
    ranker="r2",
    epochs=8,
    batch=32,
    lr=0.003,
    dropout=0.1,
    seed=11,
    fractions=(0.4,),
    folds=4,
    tcn_filters=16,
    lstm_dim=8,
    embed_dim=8,
    head_hidden=24,
    max_pairs_per_epoch=512,
)
fraction = 0.4
print(f"\ntraining the difference ranker at {fraction:.0%} observation ...")
checkpoint = train(splits[0], train_config, fraction)
print(f"  best epoch {checkpoint.best_epoch}, "
      f"validation AUC {checkpoint.validation_auc:.3f}")

learned = evaluate(checkpoint, splits[0].test, fraction)
greedy = evaluate_greedy(splits[0].test, fraction)
print(f"\nheld-out jobs at {fraction:.0%} observation ({learned.pairs} pairs):")
print(f"  greedy baseline: AUC {greedy.auc:.3f}, accuracy {greedy.accuracy:.3f}")
print(f"  trained ranker:  AUC {learned.auc:.3f}, accuracy {learned.accuracy:.3f}")
print("\nthe ranker sees the same truncated curves as the greedy call, plus the")
print("hyperparameters, architecture shape, and domain id; the late-ramp signal")
print("lives in that metadata, which is where the accuracy gap comes from.")
