"""
Directional trend checks on synthetic [4, 16] data, d=20, 50 train / 20 test
per fine category. Two datasets are used:

- default: well separated coarse groups (coarse_scale 10, fine_scale 3).
  Coarse accuracy saturates near 1.0 here.
- interleaved: coarse centers almost coincide (coarse_scale 1, fine_scale 5),
  so each coarse class is a union of four distant fine clusters and coarse
  accuracy depends on how well fine structure is learned.
"""

import os

from granular_trainer.hier_induce import partition_of
from granular_trainer.models import Variant
from granular_trainer.service import ExperimentService
from shared.taxonomy import load_taxonomy
from tests.evaluation.benchmark import BenchContext, TrendTask

SEEDS = [0, 1, 2, 3, 4]
EPOCHS = 30
INTERLEAVED = {"coarse_scale": 1.0, "fine_scale": 5.0, "noise": 1.5}


def _data(context: BenchContext, name: str = "data", **synth) -> str:
    data_dir = os.path.join(context.workdir, name)
    if not os.path.exists(os.path.join(data_dir, "taxonomy.txt")):
        context.service.gen_data((4, 16), data_dir, **synth)
    return data_dir


def _default_data(context: BenchContext) -> str:
    return _data(context)


def _interleaved_data(context: BenchContext) -> str:
    return _data(context, "interleaved", **INTERLEAVED)


def _sweep_means(context: BenchContext, data_dir, alphas, betas, name):
    result = context.service.sweep(
        data_dir,
        os.path.join(context.workdir, f"{name}.csv"),
        alphas,
        betas,
        SEEDS,
        overrides={"epochs": EPOCHS},
        jobs=context.jobs,
    )
    return {(s.alpha, s.beta): s for s in result.aggregate()}


def check_coarse_gains_from_fine_loss(context: BenchContext) -> bool:
    cells = _sweep_means(
        context, _interleaved_data(context), [1.0], [0.0, 1.0], "beta"
    )
    with_fine, without_fine = cells[(1.0, 1.0)], cells[(1.0, 0.0)]
    print(
        f"coarse acc: beta=1 {with_fine.coarse_mean:.4f} "
        f"/ beta=0 {without_fine.coarse_mean:.4f}"
    )
    return with_fine.coarse_mean >= without_fine.coarse_mean


def check_fine_suffers_from_coarse_loss(context: BenchContext) -> bool:
    cells = _sweep_means(context, _default_data(context), [0.0, 1.0], [1.0], "alpha")
    alone, joint = cells[(0.0, 1.0)], cells[(1.0, 1.0)]
    print(f"fine acc: alpha=0 {alone.fine_mean:.4f} / alpha=1 {joint.fine_mean:.4f}")
    return alone.fine_mean >= joint.fine_mean


def check_disentangled_heads_beat_shared_features(context: BenchContext) -> bool:
    result = context.service.compare(
        _interleaved_data(context),
        [Variant.VANILLA_SINGLE, Variant.OURS],
        SEEDS,
        overrides={"epochs": EPOCHS},
        jobs=context.jobs,
    )
    pairs = result.paired_avg_acc(Variant.OURS, Variant.VANILLA_SINGLE)
    wins = sum(ours >= vanilla for ours, vanilla in pairs)
    summaries = result.summaries()
    ours = summaries[Variant.OURS].mean_avg_acc
    vanilla = summaries[Variant.VANILLA_SINGLE].mean_avg_acc
    print(
        f"avg acc: ours {ours:.4f} / vanilla_single {vanilla:.4f}, "
        f"ours ahead on {wins}/{len(pairs)} seeds"
    )
    return ours >= vanilla


def check_hierarchy_recovery(context: BenchContext) -> bool:
    recovered = 0
    for seed in (0, 1, 2):
        service = ExperimentService(seed=seed)
        data_dir = os.path.join(context.workdir, f"low-noise-{seed}")
        # noise at a tenth of the fine-center spread
        service.gen_data((4, 16), data_dir, noise=0.3)
        truth = load_taxonomy(os.path.join(data_dir, "taxonomy.txt"))
        induced = service.build_hierarchy(
            data_dir, [4], os.path.join(context.workdir, f"induced-{seed}.txt")
        )
        recovered += partition_of(induced, 1) == partition_of(truth, 1)
    print(f"coarse partition recovered for {recovered}/3 seeds")
    return recovered == 3


def check_training_descends(context: BenchContext) -> bool:
    result = context.service.train(
        _default_data(context),
        os.path.join(context.workdir, "run"),
        overrides={"epochs": 10},
    )
    return result.final_loss < result.initial_loss


COARSE_TREND = TrendTask(
    name="Coarse accuracy rises with beta",
    description="interleaved data, alpha=1: mean coarse acc at beta=1 >= at beta=0",
    check=check_coarse_gains_from_fine_loss,
)

FINE_TREND = TrendTask(
    name="Fine accuracy falls with alpha",
    description="beta=1: mean fine accuracy at alpha=0 >= at alpha=1",
    check=check_fine_suffers_from_coarse_loss,
)

BASELINE_ORDER = TrendTask(
    name="Ours beats vanilla_single",
    description="interleaved data: mean avg_acc of ours >= vanilla_single, 5 seeds",
    check=check_disentangled_heads_beat_shared_features,
)

HIERARCHY_RECOVERY = TrendTask(
    name="Hierarchy recovery",
    description="induced 4-way partition equals the generator's for 3/3 seeds",
    check=check_hierarchy_recovery,
)

DESCENT = TrendTask(
    name="Training descends",
    description="final train loss below the initial loss after 10 epochs",
    check=check_training_descends,
)

ALL_TASKS = [DESCENT, HIERARCHY_RECOVERY, COARSE_TREND, FINE_TREND, BASELINE_ORDER]
