"""Pipeline stages shared by the CLI, the scripts and the acceptance suite.

Every stage reads a RunConfig and writes into ``config.output_dir``:

    data/       logged slates and candidate sets (JSONL, with headers)
    critic/     critic checkpoints and per-epoch loss CSVs
    policy/     policy checkpoints and learning curves
    eval/       EvalReport JSON, attention CSV, report tables
"""
from __future__ import annotations

import csv
import json
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from . import evaluation as ev
from .config import RunConfig
from .critic import (CriticConfig, OptimizerConfig, SUBNETS, baseline_ncand_scorer, config_from_params,
                     critic_item_probs, fit_calibration, predict, pointwise_forward, train_critic, train_ncand,
                     train_pointwise)
from .data import (LABEL_CODE, CandidateSet, DatasetError, SlateSample, is_positive, pack_candidates, pack_slates,
                   read_all, reweight_negatives, write_dataset)
from .env import Oracle
from .policy import PolicyConfig, init_policy, rollout_batch, slate_log_prob
from .rl import ALGORITHMS, TrainConfig, critic_slate_scores, slate_entropy_rows, train_policy
from .tensor import ParamStore


class MissingArtifactError(FileNotFoundError):
    pass


def deterministic() -> None:
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)


def derive_seed(seed: int, *keys: str) -> int:
    """Stable child seed for a named pipeline stage."""
    words = [seed] + [zlib.crc32(k.encode()) for k in keys]
    return int(np.random.SeedSequence(words).generate_state(1)[0])


# data ---------------------------------------------------------------------

SPLITS = ("logged_train", "logged_test", "policy_train", "policy_eval")


def _logged_chunk(args):
    oracle, seeds, offset = args
    cands, slates = [], []
    for i, rng in enumerate(seeds):
        rng = np.random.default_rng(rng)
        cs = oracle.sample_candidate_set(rng)
        cands.append(cs)
        slates.append(oracle.logged_sample(cs, rng, ref=offset + i))
    return cands, slates


def _cand_chunk(args):
    oracle, seeds, _ = args
    return [oracle.sample_candidate_set(np.random.default_rng(s)) for s in seeds], None


def _generate(oracle: Oracle, count: int, seed: int, logged: bool, workers: int):
    # the per-sample seed sequences are fixed up front so the worker count never changes the output
    seqs = np.random.SeedSequence(seed).spawn(count)
    fn = _logged_chunk if logged else _cand_chunk
    if workers <= 1 or count < 2 * workers:
        parts = [fn((oracle, seqs, 0))]
    else:
        bounds = np.linspace(0, count, workers + 1).astype(int)
        jobs = [(oracle, seqs[a:b], int(a)) for a, b in zip(bounds[:-1], bounds[1:])]
        with ProcessPoolExecutor(workers) as pool:
            parts = list(pool.map(fn, jobs))
    cands = [c for p in parts for c in p[0]]
    slates = [s for p in parts for s in p[1]] if logged else None
    return cands, slates


def data_paths(cfg: RunConfig) -> dict[str, Path]:
    ext = ".jsonl.gz" if cfg.data.compress else ".jsonl"
    root = cfg.out / "data"
    out = {}
    for split in SPLITS:
        out[split] = root / f"{split}{ext}"
        if split.startswith("logged"):
            out[split + "_candidates"] = root / f"{split}_candidates{ext}"
    return out


def gen_data(cfg: RunConfig, log=print) -> dict[str, int]:
    """Generate every split and write it with a provenance header."""
    oracle = Oracle(cfg.oracle, cfg.schema)
    paths = data_paths(cfg)
    sizes = {"logged_train": cfg.data.n_logged_train, "logged_test": cfg.data.n_logged_test,
             "policy_train": cfg.data.n_policy_train, "policy_eval": cfg.data.n_policy_eval}
    counts = {}
    for split in SPLITS:
        seed = derive_seed(cfg.seed, "data", split)
        head = {"split": split, "seed": cfg.seed, "oracle": cfg.oracle.to_dict(),
                "schema": asdict(cfg.schema), "provenance": cfg.provenance()}
        if split.startswith("logged"):
            cands, slates = _generate(oracle, sizes[split], seed, True, cfg.workers)
            if split == "logged_train" and slates:
                slates = reweight_negatives(slates, cfg.data.negative_ratio, derive_seed(cfg.seed, "reweight"))
            counts[split] = write_dataset(paths[split], slates, {**head, "records": "slate"})
            counts[split + "_candidates"] = write_dataset(paths[split + "_candidates"], cands,
                                                          {**head, "records": "candidates"})
        else:
            cands, _ = _generate(oracle, sizes[split], seed, False, cfg.workers)
            counts[split] = write_dataset(paths[split], cands, {**head, "records": "candidates"})
        log(f"{split}: {counts[split]} records -> {paths[split]}")
    return counts


@dataclass
class LoadedData:
    slates: list[SlateSample]
    cands: list[CandidateSet]       # indexed by each slate's candidate_ref
    header: dict | None


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(f"{what} not found at {path}; run the earlier pipeline stage first")
    return path


def load_logged(cfg: RunConfig, split: str) -> LoadedData:
    p = data_paths(cfg)
    slates, header = read_all(_require(p[split], f"{split} dataset"), expect="slate")
    cands, _ = read_all(_require(p[split + "_candidates"], f"{split} candidates"), expect="candidates")
    for s in slates:
        if s.candidate_ref is None or not 0 <= s.candidate_ref < len(cands):
            raise DatasetError(f"{split}: slate refers to missing candidate set {s.candidate_ref}")
    return LoadedData(slates, cands, header)


def load_candidates(cfg: RunConfig, split: str) -> list[CandidateSet]:
    records, _ = read_all(_require(data_paths(cfg)[split], f"{split} dataset"), expect="candidates")
    return records


def logged_arrays(cfg: RunConfig, data: LoadedData):
    """(candidate batch, slate indices [N,k], label codes [N,k]) aligned row by row."""
    cands = pack_candidates([data.cands[s.candidate_ref] for s in data.slates], cfg.schema)
    idx = np.array([s.slate_indices for s in data.slates], dtype=np.int64).reshape(len(data.slates), cfg.schema.k)
    return cands, idx, pack_slates(data.slates, cfg.schema).labels


# critics ------------------------------------------------------------------

def variant_name(subnets) -> str:
    if set(subnets) == set(SUBNETS):
        return "fsc"
    return "dnn" if not subnets else "dnn+" + "+".join(subnets)


def critic_variants(cfg: RunConfig) -> dict[str, CriticConfig]:
    out = {variant_name(row): cfg.critic.variant(row) for row in cfg.eval.ablation_grid}
    return out


def critic_path(cfg: RunConfig, name: str = "fsc") -> Path:
    return cfg.out / "critic" / f"{name}.ckpt"


def _opt(cfg: RunConfig, name: str) -> OptimizerConfig:
    return OptimizerConfig(**{**asdict(cfg.critic_optimizer), "seed": derive_seed(cfg.seed, "critic", name)})


def _write_losses(path: Path, losses) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss"])
        for i, v in enumerate(losses, start=1):
            w.writerow([i, repr(float(v))])


def train_critics(cfg: RunConfig, names=("fsc",), log=print) -> dict[str, Path]:
    """Train the named models: ``fsc``, ablation variants, ``pointwise``, ``ncand``."""
    data = load_logged(cfg, "logged_train")
    batch = pack_slates(data.slates, cfg.schema)
    variants = critic_variants(cfg)
    out = {}
    (cfg.out / "critic").mkdir(parents=True, exist_ok=True)
    for name in names:
        opt = _opt(cfg, name)
        if name == "fsc":
            params, tl = train_critic(batch, cfg.schema, cfg.critic, opt)
        elif name in variants:
            params, tl = train_critic(batch, cfg.schema, variants[name], opt)
        elif name == "pointwise":
            params, tl = train_pointwise(batch, cfg.schema, cfg.critic, opt)
        elif name == "ncand":
            cands, idx, labels = logged_arrays(cfg, data)
            params, tl = train_ncand(cands, idx, labels, cfg.schema, cfg.critic, opt)
        else:
            raise ValueError(f"unknown critic model {name!r}")
        if params.kind == "critic":
            params.meta["calibration_shift"] = _calibration_shift(params, batch, data)
        params.meta["provenance"] = cfg.provenance()
        path = critic_path(cfg, name)
        params.save(path)
        _write_losses(path.with_suffix(".loss.csv"), tl.epoch_loss)
        log(f"critic {name}: final loss {tl.epoch_loss[-1]:.5f} -> {path}")
        out[name] = path
    return out


def _calibration_shift(params: ParamStore, batch, data: LoadedData) -> float:
    # negative slates were subsampled; weight the kept ones back up to the generated count
    pos = np.array([is_positive(s) for s in data.slates])
    n_neg_kept = int((~pos).sum())
    n_neg = len(data.cands) - int(pos.sum())
    w = np.where(pos, 1.0, n_neg / n_neg_kept if n_neg_kept else 1.0)
    probs = critic_item_probs(params, config_from_params(params), batch.context, batch.items)
    return fit_calibration(probs, batch.labels >= LABEL_CODE["atc"], w)


def load_critic(cfg: RunConfig, name: str = "fsc") -> ParamStore:
    return ParamStore.load(_require(critic_path(cfg, name), f"critic checkpoint {name!r}"))


def score_test(cfg: RunConfig, name: str, params: ParamStore, test: LoadedData) -> ev.AucTriple:
    """AUC triple of any trained critic or baseline on the held-out logged slates."""
    batch = pack_slates(test.slates, cfg.schema)
    kind = params.kind
    if kind == "critic":
        return ev.eval_critic(params, config_from_params(params), batch)
    if kind == "pointwise":
        probs = predict(lambda i: pointwise_forward(params, batch.context.take(i), batch.items.take(i)),
                        len(batch))
    elif kind == "ncand":
        cands, idx, _ = logged_arrays(cfg, test)
        scores = predict(lambda i: baseline_ncand_scorer(params, cands.context.take(i), cands.items.take(i)),
                         len(cands))
        probs = np.take_along_axis(scores, idx, 1)
    else:
        raise ValueError(f"cannot score a {kind!r} checkpoint")
    return ev.auc_triple(probs, batch.labels)


def oracle_auc(cfg: RunConfig, test: LoadedData) -> ev.AucTriple:
    oracle = Oracle(cfg.oracle, cfg.schema)
    probs = np.array([oracle.slate_probs(s.context, list(s.items)) for s in test.slates])
    return ev.auc_triple(probs, pack_slates(test.slates, cfg.schema).labels)


# policies -----------------------------------------------------------------

def policy_path(cfg: RunConfig, algorithm: str) -> Path:
    return cfg.out / "policy" / f"{algorithm}.ckpt"


def policy_config(cfg: RunConfig, algorithm: str) -> PolicyConfig:
    return PolicyConfig(**{**asdict(cfg.policy), "use_sg": cfg.policy.use_sg and algorithm != "reinforce-real"})


def write_curve(path: Path, curve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["batch", "mean_slate_score", "mean_entropy", "mean_bonus"])
        for row in curve:
            w.writerow([row.batch, repr(row.mean_slate_score), repr(row.mean_entropy), repr(row.mean_bonus)])


def read_curve(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def train_policies(cfg: RunConfig, algorithms, log=print, critic_name: str = "fsc",
                   tag: str = "") -> dict[str, Path]:
    if not critic_path(cfg, critic_name).exists():
        raise MissingArtifactError(f"train-policy needs a critic checkpoint at {critic_path(cfg, critic_name)}; "
                                   "run train-critic first")
    critic = load_critic(cfg, critic_name)
    ccfg = config_from_params(critic)
    train = pack_candidates(load_candidates(cfg, "policy_train"), cfg.schema)
    eval_sets = load_candidates(cfg, "policy_eval")[:cfg.trainer.eval_contexts]
    eval_cands = pack_candidates(eval_sets, cfg.schema) if eval_sets else None
    logged = None
    out = {}
    (cfg.out / "policy").mkdir(parents=True, exist_ok=True)
    for alg in algorithms:
        if alg not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {alg!r}")
        if alg == "reinforce-real" and logged is None:
            logged = logged_arrays(cfg, load_logged(cfg, "logged_train"))
        pcfg = policy_config(cfg, alg)
        # the same seed for every algorithm: ppo-exploration with c=0 then reproduces ppo exactly
        seed = derive_seed(cfg.seed, "policy")
        tcfg = TrainConfig(**{**asdict(cfg.trainer), "seed": seed})
        init = init_policy(cfg.schema, pcfg, seed)
        res = train_policy(alg, train, critic, ccfg, pcfg, tcfg, cfg.schema.k, init,
                           eval_cands=eval_cands, logged=logged, log=log)
        res.params.meta.update({"algorithm": alg, "trainer": tcfg.to_dict(), "provenance": cfg.provenance()})
        path = cfg.out / "policy" / f"{alg}{tag}.ckpt"
        res.params.save(path)
        write_curve(path.with_suffix(".curve.csv"), res.curve)
        log(f"policy {alg}: {len(res.curve)} batches -> {path}")
        out[alg] = path
    return out


def load_policy(cfg: RunConfig, algorithm: str) -> ParamStore:
    return ParamStore.load(_require(policy_path(cfg, algorithm), f"policy checkpoint {algorithm!r}"))


# evaluation ----------------------------------------------------------------

def first_k(n_rows: int, k: int) -> np.ndarray:
    return np.tile(np.arange(k), (n_rows, 1))


@dataclass
class PolicyEval:
    algorithm: str
    replacement_ratio: float
    mean_critic_score: float
    brand_entropy: float
    price_entropy: float
    oracle_value: float


def paired_slate_scores(cfg: RunConfig, params: ParamStore, critic: ParamStore, cands_list):
    """Greedy slates plus per-context critic scores of (greedy slate, first k of LTR)."""
    ccfg = config_from_params(critic)
    cands = pack_candidates(cands_list, cfg.schema)
    slates = rollout_batch(params, PolicyConfig(**params.meta["config"]), cands, cfg.schema.k, "greedy").slates
    score = critic_slate_scores(critic, ccfg, cands, slates)
    base = critic_slate_scores(critic, ccfg, cands, first_k(len(cands), cfg.schema.k))
    return cands, slates, score, base


def eval_policy(cfg: RunConfig, params: ParamStore, critic: ParamStore, cands_list, algorithm: str) -> PolicyEval:
    cands, slates, score, base = paired_slate_scores(cfg, params, critic, cands_list)
    items = cands.items.gather(slates)
    oracle = Oracle(cfg.oracle, cfg.schema)
    value = np.mean([oracle.slate_value(cs.context, [cs.items[j] for j in row])
                     for cs, row in zip(cands_list, slates)])
    return PolicyEval(algorithm, ev.replacement_ratio_from(score, base), float(score.mean()),
                      float(slate_entropy_rows(items.ids[..., 2]).mean()),
                      float(slate_entropy_rows(items.price).mean()), float(value))


@dataclass
class IpsRow:
    algorithm: str
    ips: float
    ips_se: float
    wips: float
    wips_se: float


def ips_grid(cfg: RunConfig, policies: dict[str, ParamStore], cands_list, episodes: int | None = None,
             seed_key: str = "ips") -> list[IpsRow]:
    """IPS / wIPS of each policy's sampling distribution from one shared log.

    The log is drawn from the equal mixture of the given policies, so every
    target is covered and each ratio is at most the number of policies.
    Rewards are oracle purchase counts.
    """
    episodes = episodes or cfg.eval.ips_episodes
    rng = np.random.default_rng(derive_seed(cfg.seed, seed_key))
    oracle = Oracle(cfg.oracle, cfg.schema)
    names = list(policies)
    ctx_idx = rng.integers(0, len(cands_list), size=episodes)
    who = rng.integers(0, len(names), size=episodes)
    slates = np.zeros((episodes, cfg.schema.k), dtype=np.int64)
    for j, name in enumerate(names):
        rows = np.flatnonzero(who == j)
        if len(rows):
            p = policies[name]
            batch = pack_candidates([cands_list[i] for i in ctx_idx[rows]], cfg.schema)
            slates[rows] = rollout_batch(p, PolicyConfig(**p.meta["config"]), batch, cfg.schema.k, "sample",
                                         rng).slates
    rewards = np.zeros(episodes)
    for e in range(episodes):
        cs = cands_list[ctx_idx[e]]
        labels = oracle.slate_response(cs.context, [cs.items[j] for j in slates[e]], rng)
        rewards[e] = float(labels.count("pay"))
    logp = {}
    for name, p in policies.items():
        parts = []
        for s in range(0, episodes, 1024):
            rows = np.arange(s, min(episodes, s + 1024))
            batch = pack_candidates([cands_list[i] for i in ctx_idx[rows]], cfg.schema)
            with torch.no_grad():
                parts.append(slate_log_prob(p, PolicyConfig(**p.meta["config"]), batch, slates[rows]).numpy())
        logp[name] = np.concatenate(parts)
    stacked = np.stack([logp[n] for n in names])
    behaviour = np.logaddexp.reduce(stacked, axis=0) - np.log(len(names))
    rows = []
    for name in names:
        rows.append(IpsRow(name, ev.ips_estimate(logp[name], behaviour, rewards),
                           ev.ips_stderr(logp[name], behaviour, rewards),
                           ev.ips_estimate(logp[name], behaviour, rewards, weighted=True),
                           ev.ips_stderr(logp[name], behaviour, rewards, weighted=True)))
    return rows


def evaluate(cfg: RunConfig, algorithm: str | None = None, log=print) -> ev.EvalReport:
    """EvalReport for the main critic and (optionally) one trained policy."""
    critic = load_critic(cfg)
    test = load_logged(cfg, "logged_test")
    aucs = ev.eval_critic(critic, config_from_params(critic), pack_slates(test.slates, cfg.schema))
    report = ev.EvalReport(aucs.pv_pay, aucs.click_pay, aucs.slate_pay)
    if algorithm is not None:
        policy = load_policy(cfg, algorithm)
        eval_sets = load_candidates(cfg, "policy_eval")
        pe = eval_policy(cfg, policy, critic, eval_sets[:cfg.eval.entropy_contexts], algorithm)
        row = ips_grid(cfg, {algorithm: policy}, eval_sets, seed_key=f"ips-{algorithm}")[0]
        report.replacement_ratio = pe.replacement_ratio
        report.ips, report.wips = row.ips, row.wips
        report.brand_entropy, report.price_entropy = pe.brand_entropy, pe.price_entropy
    out = cfg.out / "eval"
    out.mkdir(parents=True, exist_ok=True)
    name = f"report-{algorithm}" if algorithm else "report"
    (out / f"{name}.json").write_text(report.to_json() + "\n")
    (out / f"{name}.txt").write_text(report.to_table() + "\n")
    log(report.to_table())
    return report


def report(cfg: RunConfig, log=print) -> dict:
    """Comparison tables from whatever checkpoints exist."""
    test = load_logged(cfg, "logged_test")
    result: dict = {"provenance": cfg.provenance()}
    critics = []
    names = ["oracle"] + [n for n in ("pointwise", "ncand") if critic_path(cfg, n).exists()]
    names += [n for n in critic_variants(cfg) if n != "fsc" and critic_path(cfg, n).exists()]
    if critic_path(cfg, "fsc").exists():
        names.append("fsc")
    for name in names:
        t = oracle_auc(cfg, test) if name == "oracle" else score_test(cfg, name, load_critic(cfg, name), test)
        critics.append({"model": name, "pv_pay": t.pv_pay, "click_pay": t.click_pay, "slate_pay": t.slate_pay})
    result["critics"] = critics
    present = [a for a in ALGORITHMS if policy_path(cfg, a).exists()]
    if present and critic_path(cfg, "fsc").exists():
        critic = load_critic(cfg)
        eval_sets = load_candidates(cfg, "policy_eval")
        policies = {a: load_policy(cfg, a) for a in present}
        result["replacement"] = [asdict(eval_policy(cfg, p, critic, eval_sets[:cfg.eval.entropy_contexts], a))
                                 for a, p in policies.items()]
        result["ips"] = [asdict(r) for r in ips_grid(cfg, policies, eval_sets)]
        top = pack_candidates(eval_sets[:cfg.eval.entropy_contexts], cfg.schema).items.gather(
            first_k(min(len(eval_sets), cfg.eval.entropy_contexts), cfg.schema.k))
        result["entropy"] = [{"slates": "first-k of LTR",
                              "brand_entropy": float(slate_entropy_rows(top.ids[..., 2]).mean()),
                              "price_entropy": float(slate_entropy_rows(top.price).mean())}] + [
            {"slates": r["algorithm"], "brand_entropy": r["brand_entropy"], "price_entropy": r["price_entropy"]}
            for r in result["replacement"]]
    else:
        result["replacement"] = result["ips"] = result["entropy"] = None
    out = cfg.out / "eval"
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    text = render_report(result)
    (out / "report.txt").write_text(text)
    log(text)
    return result


def render_report(result: dict) -> str:
    parts = ["critic AUC (held-out logged slates)",
             ev.table(result["critics"], ["model", "pv_pay", "click_pay", "slate_pay"])]
    if result["replacement"] is None:
        parts.append("policies: absent (no policy checkpoints)\n")
    else:
        parts += ["replacement ratio vs first-k of LTR",
                  ev.table(result["replacement"], ["algorithm", "replacement_ratio", "mean_critic_score",
                                                   "oracle_value"]),
                  "off-policy estimates (oracle purchase counts)",
                  ev.table(result["ips"], ["algorithm", "ips", "ips_se", "wips", "wips_se"]),
                  "slate diversity (nats)",
                  ev.table(result["entropy"], ["slates", "brand_entropy", "price_entropy"])]
    return "\n".join(parts)


def attention(cfg: RunConfig, path: Path | None = None, sample: SlateSample | None = None,
              critic_name: str = "fsc") -> np.ndarray:
    critic = load_critic(cfg, critic_name)
    sample = sample or ev.demo_slate()
    if len(sample.items) != cfg.schema.k:
        raise DatasetError(f"attention slate has {len(sample.items)} items but the critic scores k={cfg.schema.k}")
    for it in sample.items:
        it.validate(cfg.schema)
    path = path or cfg.out / "eval" / "attention.csv"
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    return ev.export_attention(critic, config_from_params(critic), sample, cfg.schema, path)



def run_all(cfg: RunConfig, log=print) -> dict[str, float]:
    """Every stage in order at this config; returns wall-clock seconds per stage.

    The critic grid is split so the FSC / n-input / point-wise trio is timed on its own.
    """
    deterministic()
    times = {}

    def timed(name, fn, *args):
        t0 = time.perf_counter()
        fn(*args)
        times[name] = time.perf_counter() - t0

    timed("gen-data", gen_data, cfg, log)
    timed("critics", train_critics, cfg, ("pointwise", "ncand", "fsc"), log)
    ablation = [n for n in critic_variants(cfg) if n != "fsc"]
    timed("ablation", train_critics, cfg, ablation, log)
    timed("policies", train_policies, cfg, cfg.eval.algorithms, log)
    timed("report", report, cfg, log)
    (cfg.out / "eval" / "times.json").write_text(json.dumps(times, indent=2, sort_keys=True) + "\n")
    return times
