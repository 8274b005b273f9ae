import functools

from ad2cn.config import Ablation, TrainConfig
from ad2cn.data import gen_shifted_gaussians
from ad2cn.trainer import train

# Reduced widths keep the synthetic runs to a few seconds each on one core.
SYNTH_CFG = dict(pretrain_iters=300, train_iters=300, d_hidden=64, d_embed=32, eval_every=100)


def synth_config(seed: int, ablate: tuple[str, ...] = ()) -> TrainConfig:
    return TrainConfig(seed=seed, ablation=Ablation.from_names(ablate), **SYNTH_CFG)


@functools.lru_cache(maxsize=None)
def synth_run(seed: int, ablate: tuple[str, ...] = ()):
    """Final eval record of a run on the default shifted-Gaussian task (cached per session)."""
    source, target = gen_shifted_gaussians(seed=seed)
    state = train(source, target, synth_config(seed, ablate))
    return state.metric_history[-1]


ACCEPTANCE: dict[int, str] = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} ({detail})"
    ACCEPTANCE[number] = line
    print(line, flush=True)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
