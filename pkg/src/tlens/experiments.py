"""Config schema and the five experiment families.

A config is an INI file with flat sections. Every key is typed and defaulted
in ``SCHEMA``; unknown sections or keys are rejected before any compute.
Each experiment writes one JSONL log per seed and a CSV summary aggregated
over seeds (mean and standard error per group).
"""

from __future__ import annotations

import configparser
import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import boost, data, lmc, netcore
from .netcore import ArchSpec
from .optim import OptimConfig
from .telescope import kernel_row_norms
from .train import TrainConfig, Trainer

EXPERIMENTS = ("approx-error", "double-descent", "grokking", "gbt-compare", "lmc")
DATASETS = ("mnist-binary", "mnist1d", "polynomial", "heavy-tailed", "csv")
TIMING_FIELDS = ("wall_time",)


class ConfigError(ValueError):
    """The config file does not match the schema."""


REQUIRED = object()


# -- schema ------------------------------------------------------------------


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(v) for v in s.replace(" ", "").split(",") if v)


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(v) for v in s.replace(" ", "").split(",") if v)


def _optional_int(s: str) -> int | None:
    return None if s.strip().lower() in ("", "full", "none") else int(s)


def _optional_float(s: str) -> float | None:
    return None if s.strip().lower() in ("", "none") else float(s)


def _choice(*options):
    def parse(s: str) -> str:
        s = s.strip()
        if s not in options:
            raise ValueError(f"{s!r} not in {options}")
        return s

    return parse


def _transforms(s: str) -> dict[str, str]:
    out = {}
    for item in s.replace(" ", "").split(","):
        if item:
            col, kind = item.split(":")
            out[col] = kind
    return out


SCHEMA: dict[str, dict[str, tuple]] = {
    "experiment": {
        "name": (_choice(*EXPERIMENTS), REQUIRED),
        "seeds": (_ints, (0,)),
        "output": (str, "runs"),
        "checkpoint_steps": (_ints, ()),
        "emit_gnuplot": (_bool, False),
    },
    "dataset": {
        "name": (_choice(*DATASETS), "mnist-binary"),
        "n_train": (int, 1000),
        "n_test": (int, 1000),
        "classes": (_ints, (3, 5)),
        "image_size": (int, 8),
        "label_noise": (float, 0.0),
        "seed": (int, 0),
        "dim": (int, 100),
        "path": (str, ""),
        "target": (str, ""),
        "transforms": (_transforms, {}),
    },
    "arch": {
        "hidden": (_ints, (200, 200)),
        "activation": (_choice("relu", "quadratic"), "relu"),
        "epsilon": (float, 0.0),
        "output_activation": (_choice("identity", "sigmoid"), "identity"),
        "final_layer_trainable": (_bool, True),
        "bias": (_bool, True),
        "init_scale": (float, 1.0),
    },
    "optim": {
        "kind": (_choice("sgd", "momentum", "weight_decay", "adamw"), "sgd"),
        "gamma": (float, 1e-3),
        "beta1": (float, 0.9),
        "beta2": (float, 0.99),
        "lambda": (float, 0.0),
        "eps": (float, 1e-8),
        "warmup_steps": (int, 0),
        "decay_steps": (_ints, ()),
        "decay_factor": (float, 0.1),
    },
    "training": {
        "steps": (int, 1000),
        "batch_size": (_optional_int, None),
        "loss": (_choice("squared", "bce"), "squared"),
        "stop_at_perfect_train": (_bool, False),
        "plateau_epochs": (int, 0),
        "plateau_tol": (float, 1e-4),
    },
    "tracking": {
        "enabled": (_bool, True),
        "test_subset": (int, 1000),
        "log_every": (int, 100),
        "smoother": (_bool, False),
        "offset_mode": (_choice("exact", "linearized"), "exact"),
        "invariant_tol": (_optional_float, 1e-7),
        "post_activation": (_bool, False),
        "smoother_budget": (int, 200_000_000),
    },
    "sweep": {
        "widths": (_ints, (1, 2, 4, 8, 16, 32, 64, 128, 256, 400)),
    },
    "gbt": {
        "gamma": (float, 0.1),
        "stages": (int, 200),
        "max_depth": (int, 3),
        "mixtures": (_floats, (0.0, 0.1, 0.25, 0.5)),
        "irregular_fraction": (float, 0.1),
        "test_size": (int, 1000),
        "norm_every": (int, 100),
        "n_samples": (int, 12000),
    },
    "lmc": {
        "spawn_steps": (_ints, (0,)),
        "horizon": (int, 0),
        "n_alpha": (int, 30),
        "eval_size": (int, 1000),
        "child_offsets": (_ints, (1000, 2000)),
        "parent_offset": (int, 100),
    },
}


@dataclass
class ExperimentConfig:
    sections: dict[str, dict]
    source: str = ""

    def __getitem__(self, section: str) -> dict:
        return self.sections[section]

    @property
    def name(self) -> str:
        return self.sections["experiment"]["name"]

    @property
    def seeds(self) -> tuple[int, ...]:
        return self.sections["experiment"]["seeds"]

    @property
    def output(self) -> Path:
        return Path(self.sections["experiment"]["output"])

    def arch(self, input_dim: int, width: int | None = None) -> ArchSpec:
        a = self["arch"]
        hidden = a["hidden"] if width is None else (width,) * max(len(a["hidden"]), 1)
        return ArchSpec(input_dim, hidden, 1, a["activation"], a["epsilon"], a["output_activation"],
                        a["final_layer_trainable"], a["bias"])

    def optim(self) -> OptimConfig:
        o = self["optim"]
        return OptimConfig(o["kind"], o["gamma"], o["beta1"], o["beta2"], o["lambda"], o["eps"], o["warmup_steps"],
                           o["decay_steps"], o["decay_factor"])

    def train_config(self, spec: ArchSpec, seed: int, data_seed: int | None = None) -> TrainConfig:
        tr, tk = self["training"], self["tracking"]
        return TrainConfig(
            spec, self.optim(), tr["steps"], tr["batch_size"], tr["loss"], init_seed=seed,
            data_seed=seed if data_seed is None else data_seed, init_scale=self["arch"]["init_scale"],
            track=tk["enabled"], post_activation=tk["post_activation"], smoother=tk["smoother"],
            offset_mode=tk["offset_mode"], test_subset=tk["test_subset"], log_every=tk["log_every"],
            invariant_tol=tk["invariant_tol"], stop_at_perfect_train=tr["stop_at_perfect_train"],
            plateau_epochs=tr["plateau_epochs"], plateau_tol=tr["plateau_tol"], smoother_budget=tk["smoother_budget"],
        )


def parse_config(text: str, source: str = "<string>") -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text, source)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    sections = {}
    for name in cp.sections():
        if name not in SCHEMA:
            raise ConfigError(f"{source}: unknown section [{name}]")
    for name, keys in SCHEMA.items():
        values = {}
        given = dict(cp[name]) if cp.has_section(name) else {}
        for key in given:
            if key not in keys:
                raise ConfigError(f"{source}: unknown key {key!r} in [{name}]")
        for key, (parse, default) in keys.items():
            if key in given:
                try:
                    values[key] = parse(given[key])
                except ValueError as exc:
                    raise ConfigError(f"{source}: [{name}] {key}: {exc}") from exc
            elif default is REQUIRED:
                raise ConfigError(f"{source}: missing required key {key!r} in [{name}]")
            else:
                values[key] = default
        sections[name] = values
    cfg = ExperimentConfig(sections, source)
    _validate(cfg)
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"{path}: no such config file")
    return parse_config(path.read_text(), str(path))


def _validate(cfg: ExperimentConfig) -> None:
    """Cross-field checks; also builds the typed blocks so their own validation runs."""
    if not cfg.seeds:
        raise ConfigError("at least one seed is required")
    if len(set(cfg.seeds)) != len(cfg.seeds):
        raise ConfigError("seeds must be distinct")
    try:
        cfg.optim()
        cfg.arch(1)
        cfg.train_config(cfg.arch(1), 0)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    ds = cfg["dataset"]
    if not 0.0 <= ds["label_noise"] <= 1.0:
        raise ConfigError("label_noise must lie in [0, 1]")
    if ds["name"] == "csv" and not (ds["path"] and ds["target"]):
        raise ConfigError("a csv dataset needs both path and target")
    if cfg.name == "gbt-compare" and not all(0.0 <= p <= 1.0 for p in cfg["gbt"]["mixtures"]):
        raise ConfigError("mixture proportions must lie in [0, 1]")
    if cfg.name == "lmc" and cfg["lmc"]["n_alpha"] < 2:
        raise ConfigError("n_alpha must be at least 2")
    if cfg.name == "lmc" and len(cfg["lmc"]["child_offsets"]) != 2:
        raise ConfigError("child_offsets needs exactly two values")
    if any(w < 1 for w in cfg["sweep"]["widths"]):
        raise ConfigError("widths must be positive")


# -- datasets ----------------------------------------------------------------


def load_dataset(cfg: ExperimentConfig) -> data.Dataset:
    ds = cfg["dataset"]
    name = ds["name"]
    if name == "mnist-binary":
        a, b = ds["classes"]
        size = (ds["image_size"], ds["image_size"])
        out = data.mnist_binary_task(a, b, ds["n_train"], ds["n_test"], size, ds["seed"])
    elif name == "mnist1d":
        out = data.mnist1d_task(ds["n_train"], ds["n_test"], seed=ds["seed"])
    elif name == "polynomial":
        out, _ = data.polynomial_task(ds["dim"], ds["n_train"], ds["n_test"], ds["seed"])
    elif name == "heavy-tailed":
        x, y = data.heavy_tailed_regression(ds["n_train"] + ds["n_test"], seed=ds["seed"])
        x, y = data.standardize(x)[0], (y - y.mean()) / y.std()
        n = ds["n_train"]
        out = data.Dataset(x[:n], y[:n], x[n:], y[n:], dict(task="heavy_tailed", seed=ds["seed"]))
    else:
        x, y, manifest = data.load_csv_tabular(ds["path"], ds["target"], ds["transforms"])
        n = min(ds["n_train"], len(y))
        out = data.Dataset(x[:n], y[:n], x[n:], y[n:], manifest)
    if ds["label_noise"] > 0:
        out = data.add_label_noise(out, ds["label_noise"], ds["seed"])
    return out


# -- logging -----------------------------------------------------------------


def _clean(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v


def record_line(rec: dict) -> str:
    return json.dumps({k: _clean(v) for k, v in rec.items()}, sort_keys=True)


def write_jsonl(path, records) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(record_line(rec) + "\n")


def read_jsonl(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line]


def strip_timing(records) -> list[dict]:
    return [{k: v for k, v in r.items() if k not in TIMING_FIELDS} for r in records]


def summarize(per_seed: dict[int, list[dict]], key: str) -> list[dict]:
    """Mean and standard error of every numeric field, grouped by ``key`` (last record per group and seed)."""
    groups: dict = {}
    for seed, records in per_seed.items():
        last = {}
        for r in records:
            last[r[key]] = r
        for g, r in last.items():
            groups.setdefault(g, []).append(r)
    rows = []
    for g in sorted(groups):
        recs = groups[g]
        row = {key: g, "n_seeds": len(recs)}
        fields = sorted({k for r in recs for k, v in r.items()
                         if k != key and k not in TIMING_FIELDS and isinstance(v, (int, float)) and not isinstance(v, bool)})
        for f in fields:
            vals = np.array([r[f] for r in recs if isinstance(r.get(f), (int, float))], dtype=np.float64)
            row[f"{f}_mean"] = float(vals.mean())
            row[f"{f}_stderr"] = float(vals.std(ddof=1) / np.sqrt(len(vals))) if len(vals) > 1 else 0.0
        rows.append(row)
    return rows


def write_summary(path, rows) -> None:
    fields = []
    for r in rows:
        fields += [k for k in r if k not in fields]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)


GNUPLOT_Y = {
    "approx-error": ("step", ["mean_abs_tilde", "mean_abs_lin"]),
    "double-descent": ("width", ["test_err", "p_train", "p_test"]),
    "grokking": ("step", ["train_mse", "test_mse", "p_train", "p_test"]),
    "gbt-compare": ("mixture", ["ratio_nn", "ratio_gbt", "relative_mse"]),
    "lmc": ("spawn_step", ["barrier", "drift_output"]),
}


def emit_gnuplot(cfg: ExperimentConfig, summary_path: Path) -> Path:
    xkey, ys = GNUPLOT_Y[cfg.name]
    header = summary_path.read_text().splitlines()[0].split(",")
    col = {name: i + 1 for i, name in enumerate(header)}
    plots = [f"'{summary_path.name}' every ::1 using {col[xkey]}:{col[y + '_mean']}:{col[y + '_stderr']} "
             f"with yerrorlines title '{y}'" for y in ys if y + "_mean" in col]
    script = summary_path.with_suffix(".gp")
    log_axes = "set logscale x\n" if xkey == "width" else ""
    script.write_text(
        "set datafile separator ','\n"
        f"set terminal pngcairo size 900,600\nset output '{summary_path.stem}.png'\n"
        f"set xlabel '{xkey}'\n{log_axes}plot " + ", \\\n     ".join(plots) + "\n"
    )
    return script


# -- checkpoints -------------------------------------------------------------


def _arch_header(spec: ArchSpec) -> dict:
    return dict(input_dim=spec.input_dim, hidden_dims=list(spec.hidden_dims), output_dim=spec.output_dim,
                hidden_activation=spec.hidden_activation, epsilon=spec.epsilon,
                output_activation=spec.output_activation, final_layer_trainable=spec.final_layer_trainable,
                bias=spec.bias)


def save_cell_checkpoint(path, cfg: ExperimentConfig, tr: Trainer, seed: int, cell: dict, done: list) -> None:
    header = dict(
        experiment=cfg.name, seed=seed, step=tr.t, cell=cell, arch=_arch_header(tr.cfg.spec),
        records=[{k: _clean(v) for k, v in r.items()} for r in tr.records],
        done=[{k: _clean(v) for k, v in r.items()} for r in done],
        stale=[_clean(tr._best_loss), tr._stale_epochs], stopped=tr.stopped,
    )
    netcore.save_checkpoint(path, header, tr.state_arrays())


# -- trainer-based experiments ---------------------------------------------------


def _grok_fields(rec: dict) -> dict:
    # squared loss is half the squared error; MSE is reported on the usual scale
    rec["train_mse"] = 2.0 * rec["train_loss"]
    if rec.get("test_loss") is not None:
        rec["test_mse"] = 2.0 * rec["test_loss"]
    return rec


def _run_cell(cfg: ExperimentConfig, ds: data.Dataset, seed: int, cell: dict, done: list, out_dir: Path,
              resume=None) -> list[dict]:
    width = cell.get("width")
    spec = cfg.arch(ds.x_train.shape[1], width)
    tcfg = cfg.train_config(spec, seed)
    binary = cfg["dataset"]["name"] in ("mnist-binary", "mnist1d")
    tr = Trainer(tcfg, ds.x_train, ds.y_train, ds.x_test, ds.y_test, binary=binary)
    if resume is not None:
        header, arrays = resume
        if header["arch"] != _arch_header(spec):
            raise ConfigError("checkpoint architecture does not match the config")
        tr.load_state(arrays, header["step"], (math.inf if header["stale"][0] is None else header["stale"][0],
                                               header["stale"][1]))
        tr.records = [dict(r) for r in header["records"]]
        tr.stopped = header["stopped"]
    ckpt_steps = set(cfg["experiment"]["checkpoint_steps"])
    tag = "" if width is None else f"_w{width}"

    def on_step(t):
        if t.t in ckpt_steps:
            save_cell_checkpoint(out_dir / f"ckpt_seed{seed}{tag}_step{t.t}.tlck", cfg, t, seed, cell, done)

    if resume is None and 0 in ckpt_steps:
        tr.run(until=0)
        on_step(tr)
    tr.run(callback=on_step)
    out = []
    for r in tr.records:
        r = dict(cell, **r)
        if cfg.name == "grokking":
            _grok_fields(r)
        out.append(r)
    return out


def _cells(cfg: ExperimentConfig) -> list[dict]:
    if cfg.name == "double-descent":
        return [{"width": w} for w in cfg["sweep"]["widths"]]
    return [{}]


def run_trainer_experiment(cfg: ExperimentConfig, seed: int, out_dir: Path, resume=None) -> list[dict]:
    ds = load_dataset(cfg)
    cells = _cells(cfg)
    records: list[dict] = []
    start = 0
    if resume is not None:
        header = resume[0]
        records = [dict(r) for r in header["done"]]
        start = cells.index(header["cell"])
    for cell in cells[start:]:
        recs = _run_cell(cfg, ds, seed, cell, records, out_dir, resume if cell is cells[start] and resume else None)
        if cfg.name == "double-descent":
            # the sweep keeps the final state of every width
            recs = recs[-1:]
        records += recs
    return records


# -- GBT versus NN -----------------------------------------------------------


def gbt_compare(cfg: ExperimentConfig, seed: int) -> list[dict]:
    ds_cfg, g = cfg["dataset"], cfg["gbt"]
    if ds_cfg["name"] == "heavy-tailed":
        x, y = data.heavy_tailed_regression(g["n_samples"], seed=ds_cfg["seed"])
    elif ds_cfg["name"] == "csv":
        x, y, _ = data.load_csv_tabular(ds_cfg["path"], ds_cfg["target"], ds_cfg["transforms"], False, False)
    else:
        raise ConfigError("gbt-compare needs a tabular dataset (heavy-tailed or csv)")
    x = data.standardize(x)[0]
    y = (y - y.mean()) / y.std()
    regular, irregular = data.split_irregular(x, g["irregular_fraction"])
    rng = np.random.default_rng([seed & 0xFFFFFFFF, 17])
    regular = rng.permutation(regular)
    n_train = ds_cfg["n_train"]
    train_idx, reg_pool = np.sort(regular[:n_train]), regular[n_train:]
    x_tr, y_tr = x[train_idx], y[train_idx]
    tests = {p: data.build_mixture_testset(reg_pool, irregular, p, g["test_size"], seed=seed) for p in g["mixtures"]}
    eval_idx = np.unique(np.concatenate(list(tests.values())))
    pos = {int(i): k for k, i in enumerate(eval_idx)}
    x_eval = x[eval_idx]

    # neural network with kernel-row norms sampled along training
    spec = cfg.arch(x.shape[1])
    tcfg = cfg.train_config(spec, seed)
    tcfg.track = False
    tcfg.smoother = False
    tr = Trainer(tcfg, x_tr, y_tr, x_eval, y[eval_idx], binary=False)
    norms_eval, norms_train = [], []
    x_all = np.vstack([x_tr, x_eval])
    n = len(y_tr)

    def sample(t):
        if t.t % g["norm_every"] == 0 or t.t == tcfg.steps:
            lin = netcore.Linearization(t.params, x_all, spec)
            norms_eval.append(kernel_row_norms(lin.kernel(np.arange(n, len(x_all)), np.arange(n))))
            norms_train.append(kernel_row_norms(lin.kernel(np.arange(n), np.arange(n))))

    sample(tr)
    tr.run(callback=sample)
    f_nn = netcore.predict_batch(tr.params, x_eval, spec)
    ens = boost.fit_gbt(x_tr, y_tr, g["gamma"], g["stages"], g["max_depth"])
    f_gbt = ens.predict(x_eval)
    gbt_eval = boost.tree_kernel_norms(ens, x_eval)
    gbt_train = boost.tree_kernel_norms(ens, x_tr)
    norms_eval, norms_train = np.array(norms_eval), np.array(norms_train)

    out = []
    base = None
    for p in g["mixtures"]:
        cols = np.array([pos[int(i)] for i in tests[p]])
        yp = y[tests[p]]
        mse_nn = float(np.mean((f_nn[cols] - yp) ** 2))
        mse_gbt = float(np.mean((f_gbt[cols] - yp) ** 2))
        if base is None:
            base = (mse_nn, mse_gbt)
        rec = dict(mixture=float(p), mse_nn=mse_nn, mse_gbt=mse_gbt,
                   ratio_nn=boost.kernel_norm_ratio(norms_eval[:, cols], norms_train),
                   ratio_gbt=boost.kernel_norm_ratio(gbt_eval[:, cols], gbt_train),
                   gbt_norm_min=float(gbt_eval[:, cols].min()), gbt_norm_max=float(gbt_eval[:, cols].max()),
                   n_train=n)
        try:
            rec["relative_mse"] = boost.relative_mse(mse_nn, mse_gbt, *base)
        except ZeroDivisionError:
            rec["relative_mse"] = None
        out.append(rec)
    return out


# -- linear mode connectivity ----------------------------------------------------


def lmc_experiment(cfg: ExperimentConfig, seed: int, out_dir: Path | None = None) -> list[dict]:
    """Spawn child pairs from one parent run; barrier of the trained children and parent gradient drift.

    Children train to the configured step budget. Drift compares the parent's
    output gradients at the spawn step with those ``horizon`` steps later
    (one epoch when ``horizon`` is 0).
    """
    ds = load_dataset(cfg)
    L = cfg["lmc"]
    spec = cfg.arch(ds.x_train.shape[1])
    tcfg = cfg.train_config(spec, seed, data_seed=L["parent_offset"] + seed)
    tcfg.track = False
    tcfg.smoother = False
    n, bs = len(ds.y_train), tcfg.batch_size
    horizon = L["horizon"] if L["horizon"] > 0 else (1 if bs is None or bs >= n else n // bs)
    spawns = L["spawn_steps"]
    if max(spawns) + horizon > tcfg.steps:
        raise ConfigError("the last spawn step plus the drift horizon exceeds the step budget")
    parent = Trainer(tcfg, ds.x_train, ds.y_train, ds.x_test, ds.y_test)
    snaps = lmc.collect_checkpoints(parent, list(spawns) + [s + horizon for s in spawns], until=max(spawns) + horizon)
    x_eval, y_eval = ds.x_test[: L["eval_size"]], ds.y_test[: L["eval_size"]]
    alphas = lmc.SpawnPlan(spawns, n_alpha=L["n_alpha"]).alphas
    out, reports = [], []
    for s in spawns:
        a, b = lmc.spawn_and_train(tcfg, ds, snaps, s, L["child_offsets"][0] + seed, L["child_offsets"][1] + seed)
        rep = lmc.barrier_scan(a, b, alphas, x_eval, y_eval, spec, tcfg.loss, s)
        start = parent.params.with_values(snaps[s]["params"])
        end = parent.params.with_values(snaps[s + horizon]["params"])
        rep.drift = lmc.grad_drift_by_layer(start, end, x_eval, spec)
        reports.append(rep)
        last = max(rep.drift)
        out.append(dict(spawn_step=s, horizon=horizon, barrier=rep.barrier, accuracy_gap=rep.accuracy_gap,
                        drift_output=rep.drift[last], **{f"drift_layer{k}": v for k, v in rep.drift.items()}))
    if out_dir is not None:
        lmc.write_barrier_csv(out_dir / f"lmc_barrier_seed{seed}.csv", reports)
        lmc.write_drift_csv(out_dir / f"lmc_drift_seed{seed}.csv", reports)
    return out


# -- driver ------------------------------------------------------------------------

GROUP_KEY = {"approx-error": "step", "grokking": "step", "double-descent": "width", "gbt-compare": "mixture",
             "lmc": "spawn_step"}


def run_seed(cfg: ExperimentConfig, seed: int, out_dir: Path, resume=None) -> list[dict]:
    if cfg.name in ("approx-error", "grokking", "double-descent"):
        return run_trainer_experiment(cfg, seed, out_dir, resume)
    if resume is not None:
        raise ConfigError(f"{cfg.name} runs cannot be resumed from a checkpoint")
    if cfg.name == "gbt-compare":
        return gbt_compare(cfg, seed)
    return lmc_experiment(cfg, seed, out_dir)


def finish(cfg: ExperimentConfig, out_dir: Path) -> Path:
    """Aggregate every per-seed log found for the configured seeds into the summary CSV."""
    per_seed = {s: read_jsonl(out_dir / f"{cfg.name}_seed{s}.jsonl") for s in cfg.seeds
                if (out_dir / f"{cfg.name}_seed{s}.jsonl").exists()}
    path = out_dir / f"{cfg.name}_summary.csv"
    write_summary(path, summarize(per_seed, GROUP_KEY[cfg.name]))
    if cfg["experiment"]["emit_gnuplot"]:
        emit_gnuplot(cfg, path)
    return path


def run_experiment(cfg: ExperimentConfig, out_dir=None, log=print) -> Path:
    out_dir = Path(out_dir) if out_dir is not None else cfg.output
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps({k: {kk: _clean(list(vv) if isinstance(vv, tuple) else vv)
                                                          for kk, vv in v.items()} for k, v in cfg.sections.items()},
                                                    sort_keys=True, indent=1))
    for seed in cfg.seeds:
        records = run_seed(cfg, seed, out_dir)
        path = out_dir / f"{cfg.name}_seed{seed}.jsonl"
        write_jsonl(path, records)
        log(f"seed {seed}: {len(records)} records -> {path}")
    return finish(cfg, out_dir)


def resume_experiment(ckpt_path, cfg: ExperimentConfig, out_dir=None, log=print) -> Path:
    header, arrays = netcore.load_checkpoint(ckpt_path)
    if header.get("experiment") != cfg.name:
        raise ConfigError(f"checkpoint belongs to a {header.get('experiment')!r} run, config is {cfg.name!r}")
    seed = header["seed"]
    if seed not in cfg.seeds:
        raise ConfigError(f"checkpoint seed {seed} is not among the configured seeds")
    out_dir = Path(out_dir) if out_dir is not None else cfg.output
    out_dir.mkdir(parents=True, exist_ok=True)
    records = run_seed(cfg, seed, out_dir, (header, arrays))
    path = out_dir / f"{cfg.name}_seed{seed}.jsonl"
    write_jsonl(path, records)
    log(f"seed {seed}: resumed at step {header['step']}, {len(records)} records -> {path}")
    return finish(cfg, out_dir)
