"""Command-line entry point: ``fdattack <subcommand> [options]``.

Every option may also come from a TOML or JSON file passed with
``--config``; keys use the option names with dashes or underscores.
Command-line flags win over the file.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import nn
from .apiservice import DetectionService, ServiceConfig, serve
from .attacks.core import AttackConfig, CPIConfig, InitStrategy, run_attack
from .harness.dataset import gen_dataset
from .harness.experiments import (
    ExperimentConfig,
    PairSetSpec,
    emit_report,
    make_pairs,
    run_experiment,
    transfer_eval,
    write_traces,
)
from .harness.models import ModelBundle, TrainSpec, train_models
from .imgcore import load_image, quality, save_image
from .oracles import HTTPOracle, OracleHandle, with_defense

logger = logging.getLogger("fdattack")


def _floats(text):
    return tuple(float(v) for v in str(text).split(",") if v.strip())


def load_config(path):
    path = Path(path)
    text = path.read_bytes()
    if path.suffix.lower() == ".json":
        data = json.loads(text)
    else:
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib
        data = tomllib.loads(text.decode())
    if not isinstance(data, dict):
        raise ValueError(f"{path}: config must be a table of options")
    return {k.replace("-", "_"): v for k, v in data.items()}


# -- shared option groups -----------------------------------------------------


def _add_data_opts(p, split):
    p.add_argument("--strengths", type=_floats, default=(0.03, 0.05, 0.07, 0.09), help="comma-separated")
    p.add_argument("--pairs-per-strength", type=int, default=50)
    p.add_argument("--forgery-kind", default="mixed", choices=("patch_noise", "checker_blend", "mixed"))
    p.add_argument("--reenact-jitter", type=float, default=0.0)
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--split", type=int, default=split)


def _pair_spec(a):
    return PairSetSpec(
        strengths=tuple(a.strengths),
        pairs_per_strength=a.pairs_per_strength,
        forgery_kind=a.forgery_kind,
        reenact_jitter=a.reenact_jitter,
        seed=a.data_seed,
        split=a.split,
    )


def _add_attack_opts(p):
    p.add_argument("--init", default="cpi", choices=("random", "real", "cpi"))
    p.add_argument("--eps", type=float, default=0.05)
    p.add_argument("--gamma", type=float, default=1.75)
    p.add_argument("--kappa", type=float, default=0.004)
    p.add_argument("--p", type=float, default=0.999)
    p.add_argument("--budget", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--noise-units", default="unnormalized", choices=("unnormalized", "orthonormal"))
    p.add_argument("--xi", type=float, default=0.031)
    p.add_argument("--cpi-steps", type=int, default=10)
    p.add_argument("--cpi-layer", type=int, default=nn.EMBEDDER_TAP)
    p.add_argument("--oracle", default="cnn", help="freq, cnn or http:<url>")
    p.add_argument("--defense-quality", type=int, default=None)
    p.add_argument("--domain", default="freq", choices=("freq", "spatial"))
    p.add_argument("--models", default="models")


def _attack_cfg(a):
    return AttackConfig(
        epsilon=a.eps,
        gamma=a.gamma,
        kappa=a.kappa,
        p=a.p,
        max_queries=a.budget,
        k=a.k,
        seed=a.seed,
        noise_units=a.noise_units,
    )


def _cpi_cfg(a):
    return CPIConfig(xi=a.xi, K=a.cpi_steps, layer=a.cpi_layer)


def build_oracle(name, bundle, defense_quality=None):
    """Decision function for ``freq``, ``cnn`` or ``http:<url>``."""
    if name == "freq":
        det = bundle.freq_stat
    elif name == "cnn":
        det = bundle.cnn()
    elif name.startswith("http:"):
        # accepts both "http:http://host:port" and plain "http://host:port"
        url = name[len("http:"):]
        det = HTTPOracle(url if url.startswith("http") else "http:" + url)
    else:
        raise ValueError(f"unknown oracle {name!r}")
    return with_defense(det, defense_quality) if defense_quality else det


# -- subcommands ---------------------------------------------------------------


def cmd_gen_data(a):
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = []
    for ds in _pair_spec(a).dataset_specs(a.images_per_identity, a.num_identities):
        samples = gen_dataset(ds)
        names = [
            f"s{ds.artifact_strength:.3f}_{i:05d}_{'fake' if s.label else 'real'}{a.suffix}"
            for i, s in enumerate(samples)
        ]
        for name, s in zip(names, samples):
            save_image(s.image, out / name)
            manifest.append(
                {
                    "file": name,
                    "label": "fake" if s.label else "real",
                    "identity_id": s.identity_id,
                    "strength": ds.artifact_strength,
                    "pair_file": None if s.pair_id is None else names[s.pair_id],
                }
            )
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    print(f"wrote {len(manifest)} images to {out}")
    return 0


def cmd_train(a):
    spec = TrainSpec(
        data=_pair_spec(a),
        num_identities=a.num_identities,
        images_per_identity=a.images_per_identity,
        detector=nn.TrainConfig(a.lr, a.detector_epochs, a.batch_size, a.train_seed),
        embedder=nn.TrainConfig(a.lr, a.embedder_epochs, a.batch_size, a.train_seed),
        freq_target_tpr=a.freq_target_tpr,
        embedder_highpass_gain=a.embedder_highpass_gain or None,
        detector_noise_aug=a.detector_noise_aug,
    )
    bundle = train_models(spec)
    d = bundle.save(a.models)
    print(f"saved models to {d} (freq threshold {bundle.freq_stat.threshold_:.3e})")
    return 0


def cmd_attack(a):
    bundle = ModelBundle.load(a.models)
    x_fake = load_image(a.fake)
    x_real = load_image(a.real)
    oracle = OracleHandle(build_oracle(a.oracle, bundle, a.defense_quality), a.budget)
    init = {"cpi": InitStrategy.cross_task(_cpi_cfg(a)), "real": InitStrategy.real_face()}.get(
        a.init, InitStrategy.random()
    )
    res = run_attack(x_fake, x_real, init, oracle, bundle.embedder, _attack_cfg(a), a.domain)
    summary = {"success": res.success, "reason": res.reason, "queries": res.queries_used}
    if res.success:
        adv = res.adversarial(x_fake)
        summary["eps_prime"] = res.eps_prime
        summary["quality"] = quality(x_real, adv).as_dict()
        if a.out:
            save_image(adv, a.out)
    if a.trace:
        Path(a.trace).write_text(res.trace.to_jsonl())
    print(json.dumps(summary, sort_keys=True))
    return 0 if res.success else 1


def _experiment(a, bundle, init=None, domain=None, oracle=None):
    cfg = ExperimentConfig(
        init=init or a.init,
        domain=domain or a.domain,
        attack=_attack_cfg(a),
        cpi=_cpi_cfg(a),
        seed=a.seed,
        rsr_threshold=a.rsr_threshold,
        workers=a.workers,
    )
    det = oracle or build_oracle(a.oracle, bundle, a.defense_quality)
    return run_experiment(make_pairs(_pair_spec(a)), det, bundle.embedder, cfg)


def cmd_eval(a):
    bundle = ModelBundle.load(a.models)
    report = _experiment(a, bundle)
    written = emit_report(report, a.format, a.out)
    if a.traces:
        write_traces(report, a.traces)
    print(json.dumps(report.aggregate(), sort_keys=True, default=str))
    for p in written:
        logger.info("wrote %s", p)
    return 0


def cmd_transfer(a):
    bundle = ModelBundle.load(a.models)
    source = build_oracle(a.oracle, bundle, a.defense_quality)
    target = build_oracle(a.target, bundle)
    report = _experiment(a, bundle, oracle=source)
    pairs = make_pairs(_pair_spec(a))
    tr = transfer_eval(report.adversarial, target, [p.fake for p in pairs])
    out = {
        "source": a.oracle,
        "target": a.target,
        "source_asr": report.asr,
        "transfer_rate": tr.transfer_rate,
        "clean_real_rate": tr.clean_real_rate,
        "num_adversarial": tr.num_adversarial,
    }
    print(json.dumps(out, sort_keys=True))
    if a.out:
        Path(a.out).write_text(json.dumps(out, indent=2, sort_keys=True) + "\n")
    return 0


def cmd_compare_features(a):
    bundle = ModelBundle.load(a.models)
    pairs = make_pairs(_pair_spec(a))
    images = np.stack([p.real for p in pairs[: a.images]] + [p.fake for p in pairs[: a.images]])
    m = nn.layerwise_cosine(bundle.detector, bundle.embedder, images, a.common_dim)
    lines = ["detector_layer," + ",".join(f"embedder_{j + 1}" for j in range(m.shape[1]))]
    for i, row in enumerate(m):
        lines.append(f"{i + 1}," + ",".join(f"{v:.6f}" for v in row))
    text = "\n".join(lines) + "\n"
    if a.out:
        Path(a.out).write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_serve(a):
    bundle = ModelBundle.load(a.models)
    cfg = ServiceConfig(
        host=a.host,
        port=a.port,
        detector=a.detector,
        threshold=a.threshold,
        compare_threshold=a.compare_threshold,
        reject_no_face=a.reject_no_face,
        variance_floor=a.variance_floor,
        client_budget=a.client_budget,
        expose_scores=a.expose_scores,
    )
    serve(DetectionService(cfg, bundle.detector, bundle.embedder, bundle.freq_stat))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="fdattack", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="TOML or JSON file with option defaults")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic paired dataset to disk")
    _add_data_opts(p, split=0)
    p.add_argument("--num-identities", type=int, default=50)
    p.add_argument("--images-per-identity", type=int, default=1)
    p.add_argument("--suffix", default=".png", help=".png or a float-container suffix such as .fda")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train detector and embedder, calibrate the frequency oracle")
    _add_data_opts(p, split=0)
    p.add_argument("--num-identities", type=int, default=50)
    p.add_argument("--images-per-identity", type=int, default=2)
    p.add_argument("--lr", type=float, default=0.02)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--detector-epochs", type=int, default=15)
    p.add_argument("--embedder-epochs", type=int, default=10)
    p.add_argument("--train-seed", type=int, default=0)
    p.add_argument("--freq-target-tpr", type=float, default=0.95)
    p.add_argument("--embedder-highpass-gain", type=float, default=10.0, help="0 for a plain He start")
    p.add_argument("--detector-noise-aug", type=float, default=0.05, help="0 disables noisy-real augmentation")
    p.add_argument("--models", default="models")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", help="attack one fake image")
    _add_attack_opts(p)
    p.add_argument("--fake", required=True)
    p.add_argument("--real", required=True)
    p.add_argument("--out", help="where to save the adversarial image")
    p.add_argument("--trace", help="JSONL trace output")
    p.set_defaults(func=cmd_attack)

    for name, func, helptext in (
        ("eval", cmd_eval, "run a batch experiment and write a report"),
        ("transfer", cmd_transfer, "attack one oracle, replay the successes on another"),
    ):
        p = sub.add_parser(name, help=helptext)
        _add_attack_opts(p)
        _add_data_opts(p, split=1)
        p.add_argument("--rsr-threshold", type=float, default=0.6)
        p.add_argument("--workers", type=int, default=1)
        if name == "eval":
            p.add_argument("--format", default="json", choices=("json", "csv"))
            p.add_argument("--out", default="report.json")
            p.add_argument("--traces", help="JSONL file for all trial traces")
        else:
            p.add_argument("--target", default="freq", help="oracle that receives the adversarial images")
            p.add_argument("--out")
        p.set_defaults(func=func)

    p = sub.add_parser("compare-features", help="layer-wise cosine between detector and embedder features")
    _add_data_opts(p, split=1)
    p.add_argument("--models", default="models")
    p.add_argument("--images", type=int, default=20, help="pairs to average over")
    p.add_argument("--common-dim", type=int, default=256)
    p.add_argument("--out")
    p.set_defaults(func=cmd_compare_features)

    p = sub.add_parser("serve", help="run the mock detection service")
    p.add_argument("--models", default="models")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8080)
    p.add_argument("--detector", default="cnn", choices=("cnn", "freq"))
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--compare-threshold", type=float, default=0.6)
    p.add_argument("--reject-no-face", action="store_true")
    p.add_argument("--variance-floor", type=float, default=1e-4)
    p.add_argument("--client-budget", type=int, default=None)
    p.add_argument("--expose-scores", action="store_true")
    p.set_defaults(func=cmd_serve)
    return parser


def _subparser(parser, name):
    for action in parser._subparsers._group_actions:
        if name in action.choices:
            return action.choices[name]
    raise KeyError(name)


def parse_args(argv=None):
    """Parse ``argv``, letting a ``--config`` file supply defaults that flags override."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        cfg = load_config(args.config)
        sp = _subparser(parser, args.command)
        known = {a.dest for a in sp._actions}
        unknown = sorted(set(cfg) - known - {"config", "verbose"})
        if unknown:
            parser.error(f"unknown config keys for {args.command}: {', '.join(unknown)}")
        for key in ("strengths",):
            if key in cfg and not isinstance(cfg[key], str):
                cfg[key] = tuple(float(v) for v in cfg[key])
        sp.set_defaults(**{k: v for k, v in cfg.items() if k in known})
        args = parser.parse_args(argv)
    return args


def main(argv=None):
    args = parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (OSError, ValueError) as exc:
        print(f"fdattack {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
