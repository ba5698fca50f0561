"""Command-line interface: ``cobra-ssm {generate,bench,train,verify}``.

Settings resolve as command-line flags > ``COBRA_SSM_<KEY>`` environment
variables > ``--config`` file (``key = value`` lines) > built-in defaults.
``COBRA_SSM_HOME`` names the directory holding the default checkpoint
``model.cssm``.

Exit codes::

    0   success
    1   verify: at least one suite failed
    2   an input file does not exist
    3   malformed checkpoint, feature file or image
    4   invalid configuration value
    5   inputs are individually valid but incompatible (e.g. feature width)
    64  command-line usage error
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from typing import Sequence

import numpy as np

from .backbone import BackboneConfig, GenerationSession, SamplingConfig, generate
from .bench import format_table, measure_throughput, scaling_sweep, write_reports_csv
from .container import ContainerFormatError
from .errors import CobraError, ConfigurationError
from .model import (
    CheckpointError,
    CobraConfig,
    build_sequence,
    encode_image,
    init_cobra,
    load_checkpoint,
    project_visual,
    save_checkpoint,
)
from .prompting import Conversation, detokenize, render
from .training import TrainConfig, dataset_loss, make_synthetic_dataset, run_variant, VARIANTS
from .verify import FAULTS, SUITES, run_all
from .vision import ImageInput, ingest_external_features, load_image

EXIT_OK = 0
EXIT_VERIFY_FAILED = 1
EXIT_MISSING_FILE = 2
EXIT_MALFORMED = 3
EXIT_CONFIG = 4
EXIT_INCOMPATIBLE = 5
EXIT_USAGE = 64

ENV_PREFIX = "COBRA_SSM_"
HOME_ENV = "COBRA_SSM_HOME"
CHECKPOINT_NAME = "model.cssm"

# key -> (type, default); every key can come from a flag, the environment or the config file
SETTINGS = {
    "model": (str, None),
    "image": (str, None),
    "features": (str, None),
    "template": (str, "chat"),
    "ocr_order": (str, "none"),
    "ocr_tokens": (str, None),
    "projector": (str, None),
    "question": (str, "Describe the image specifically"),
    "max_new": (int, 64),
    "seed": (int, 0),
    "report": (str, None),
    "output": (str, None),
    "trace": (str, None),
    "repeats": (int, 5),
    "samples": (int, 64),
    "lr": (float, 1e-2),
    "batch_size": (int, 1),
    "variant": (str, "ft2ep"),
    "image_size": (int, 16),
}
CHOICES = {
    "template": ("chat", "base"),
    "ocr_order": ("first", "last", "none"),
    "projector": ("mlp", "ldp"),
    "variant": tuple(VARIANTS),
}


class UsageError(Exception):
    pass


class MissingFileError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _diag(msg: str) -> None:
    print(msg, file=sys.stderr)


# --------------------------------------------------------------------------
# settings
# --------------------------------------------------------------------------


def read_config_file(path: str) -> dict[str, str]:
    if not os.path.exists(path):
        raise MissingFileError(f"config file not found: {path}")
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"{path}:{lineno}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            key = key.replace("-", "_")
            if key not in SETTINGS:
                raise ConfigurationError(f"{path}:{lineno}: unknown setting {key!r}")
            out[key] = value
    return out


def resolve_settings(flags: dict, env: dict[str, str] | None = None) -> dict:
    """Merge flags > environment > config file > defaults and validate the result."""
    env = os.environ if env is None else env
    config_path = flags.get("config") or env.get(ENV_PREFIX + "CONFIG")
    file_values = read_config_file(config_path) if config_path else {}
    out = {}
    for key, (typ, default) in SETTINGS.items():
        raw, origin = flags.get(key), "--" + key.replace("_", "-")
        if raw is None:
            raw, origin = env.get(ENV_PREFIX + key.upper()), f"${ENV_PREFIX}{key.upper()}"
        if raw is None:
            raw, origin = file_values.get(key), f"config key {key!r}"
        if raw is None:
            out[key] = default
            continue
        try:
            value = typ(raw)
        except ValueError:
            raise ConfigurationError(f"{origin}: {raw!r} is not a valid {typ.__name__}") from None
        if key in CHOICES and value not in CHOICES[key]:
            raise ConfigurationError(f"{origin}: {value!r} not in {CHOICES[key]}")
        out[key] = value
    if out["max_new"] < 1:
        raise ConfigurationError("max_new must be >= 1")
    if out["image"] and out["features"]:
        raise ConfigurationError("give either an image or a feature file, not both")
    return out


def _require(path: str | None, what: str) -> None:
    if path is not None and not os.path.exists(path):
        raise MissingFileError(f"{what} not found: {path}")


def resolve_model(s: dict, env: dict[str, str] | None = None):
    """Checkpoint from ``model`` or ``$COBRA_SSM_HOME/model.cssm``; otherwise a fresh seeded model."""
    env = os.environ if env is None else env
    path = s["model"]
    if path is None and env.get(HOME_ENV):
        candidate = os.path.join(env[HOME_ENV], CHECKPOINT_NAME)
        if os.path.exists(candidate):
            path = candidate
    if path is None:
        _diag(f"no checkpoint given; using a freshly initialized model (seed {s['seed']})")
        return init_cobra(CobraConfig(projector=s["projector"] or "mlp"), s["seed"])
    _require(path, "checkpoint")
    model = load_checkpoint(path)
    if s["projector"] and s["projector"] != model.config.projector:
        raise ConfigurationError(
            f"--projector {s['projector']} conflicts with the checkpoint's {model.config.projector} projector"
        )
    return model


def _visual_source(model, s):
    _require(s["image"], "image")
    _require(s["features"], "feature file")
    if s["features"]:
        return ingest_external_features(s["features"])
    if s["image"]:
        return load_image(s["image"], model.config.image_size)
    return None


def _conversation(s) -> Conversation:
    ordering = {"first": "ocr_first", "last": "ocr_last", "none": "none"}[s["ocr_order"]]
    if ordering != "none" and not s["ocr_tokens"]:
        raise ConfigurationError("--ocr-order first/last needs --ocr-tokens")
    return Conversation.single(s["question"], ocr=s["ocr_tokens"], ordering=ordering)


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def run_generate(s: dict) -> int:
    model = resolve_model(s)
    source = _visual_source(model, s)
    conv = _conversation(s)
    feats = encode_image(model, source) if isinstance(source, ImageInput) else source
    visual = project_visual(model, feats) if feats is not None else None
    seq = build_sequence(model, visual, conv, s["template"])
    session = GenerationSession(SamplingConfig(greedy=True, max_new=s["max_new"], seed=s["seed"]))
    if s["trace"]:
        with open(s["trace"], "w", encoding="utf-8") as fh:
            fh.write(json.dumps({"prompt": render(conv, s["template"])}) + "\n")
            ids = generate(session, seq, model.backbone,
                           trace=lambda rec: fh.write(json.dumps(rec) + "\n"))
    else:
        ids = generate(session, seq, model.backbone)
    print(detokenize(ids))
    return EXIT_OK


def run_bench(s: dict, sweep: bool) -> int:
    model = resolve_model(s)
    source = _visual_source(model, s)
    if source is None:
        side = model.config.image_size
        source = ImageInput(np.full((3, side, side), 0.5), source="grey")
    report = measure_throughput(model, source, s["question"], s["max_new"], repeats=s["repeats"],
                                template=s["template"])
    print(format_table([report]))
    if s["report"]:
        write_reports_csv(s["report"], [report])
    if sweep:
        print()
        print(scaling_sweep(model.backbone, repeats=max(5, s["repeats"]), seed=s["seed"]).table())
    return EXIT_OK


def run_train(s: dict) -> int:
    cfg = CobraConfig(image_size=s["image_size"], patch_size=8, dino_dim=8, siglip_dim=8,
                      projector=s["projector"] or "mlp",
                      backbone=BackboneConfig(d_model=16, n_layers=2, d_state=4))
    model = init_cobra(cfg, s["seed"])
    data = make_synthetic_dataset(s["samples"], s["image_size"], s["seed"])
    tc = TrainConfig(lr=s["lr"], batch_size=s["batch_size"], seed=s["seed"], template=s["template"])
    initial = dataset_loss(model, data, tc.template)
    res = run_variant(model, data, tc, s["variant"])
    final = dataset_loss(res.model, data, tc.template)
    print(f"variant {s['variant']}: {len(res.losses)} steps, loss {initial:.4f} -> {final:.4f} "
          f"(ratio {final / initial:.3f})")
    if s["report"]:
        res.write_csv(s["report"])
    if s["output"]:
        save_checkpoint(res.model, s["output"])
        _diag(f"checkpoint written to {s['output']}")
    return EXIT_OK


def run_verify(s: dict, fault: str | None, skip_timing: bool, only: list[str] | None) -> int:
    results = run_all(fault=fault, skip_timing=skip_timing, only=only)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<28} {r.detail}")
    failed = [r.name for r in results if not r.passed]
    summary = {"passed": not failed, "failed": failed, "suites": [r.as_dict() for r in results]}
    if s["report"]:
        with open(s["report"], "w", encoding="utf-8") as fh:
            json.dump(summary, fh, indent=2)
    if failed:
        _diag(f"verify failed: {', '.join(failed)}")
        return EXIT_VERIFY_FAILED
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    epilog = (
        "precedence: flags > COBRA_SSM_<KEY> environment variables > --config file > defaults.\n"
        "COBRA_SSM_HOME: directory whose model.cssm is the default checkpoint.\n"
        "exit codes: 0 ok, 1 verify failure, 2 missing file, 3 malformed checkpoint/features/image,\n"
        "            4 configuration error, 5 incompatible inputs, 64 usage error."
    )
    p = _Parser(prog="cobra-ssm", description="Linear-time multimodal SSM toolkit.", epilog=epilog,
                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, *, visual=True):
        sp.add_argument("--config", help="key = value settings file")
        sp.add_argument("--seed", help="random seed (default 0)")
        sp.add_argument("--template", help="prompt template: chat | base (default chat)")
        sp.add_argument("--projector", help="mlp | ldp")
        sp.add_argument("--report", help="write a report file (CSV for bench/train, JSON for verify)")
        if visual:
            sp.add_argument("--model", help="checkpoint path (default $COBRA_SSM_HOME/model.cssm)")
            sp.add_argument("--image", help="PPM (P6) or raw float64 3xSxS image")
            sp.add_argument("--features", help="container file with a 'features' entry")
            sp.add_argument("--question", help="user instruction")
            sp.add_argument("--max-new", dest="max_new", help="tokens to generate (default 64)")

    g = sub.add_parser("generate", help="answer a question about an image", epilog=epilog,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    common(g)
    g.add_argument("--ocr-order", dest="ocr_order", help="first | last | none (default none)")
    g.add_argument("--ocr-tokens", dest="ocr_tokens", help="reference OCR text")
    g.add_argument("--trace", help="JSON-lines trace: prompt record, then one record per step")

    b = sub.add_parser("bench", help="time generation; optionally run the decode scaling sweep", epilog=epilog,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    common(b)
    b.add_argument("--repeats", help="timed repetitions (default 5)")
    b.add_argument("--sweep", action="store_true", help="also run the context-length scaling sweep")

    t = sub.add_parser("train", help="toy fine-tune on synthetic shapes", epilog=epilog,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    common(t, visual=False)
    t.add_argument("--samples", help="synthetic samples (default 64)")
    t.add_argument("--lr", help="peak learning rate (default 1e-2)")
    t.add_argument("--batch-size", dest="batch_size", help="batch size (default 1)")
    t.add_argument("--variant", help=f"training variant: {' | '.join(VARIANTS)} (default ft2ep)")
    t.add_argument("--image-size", dest="image_size", help="synthetic image side (default 16)")
    t.add_argument("--output", help="write the trained checkpoint here")

    v = sub.add_parser("verify", help="run every invariant suite", epilog=epilog,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    v.add_argument("--config", help="key = value settings file")
    v.add_argument("--report", help="write a JSON summary")
    v.add_argument("--inject-fault", dest="inject_fault", choices=FAULTS, help="deliberately corrupt a component")
    v.add_argument("--skip-timing", action="store_true", help="skip the wall-clock scaling suite")
    v.add_argument("--only", action="append", choices=list(SUITES), help="run only the named suite(s)")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        _diag(str(exc).rstrip())
        return EXIT_USAGE
    flags = vars(args)
    try:
        s = resolve_settings(flags)
        if args.command == "generate":
            return run_generate(s)
        if args.command == "bench":
            return run_bench(s, args.sweep)
        if args.command == "train":
            return run_train(s)
        return run_verify(s, args.inject_fault, args.skip_timing, args.only)
    except MissingFileError as exc:
        _diag(f"error: {exc}")
        return EXIT_MISSING_FILE
    except (CheckpointError, ContainerFormatError) as exc:
        _diag(f"error: {exc}")
        return EXIT_MALFORMED
    except ConfigurationError as exc:
        _diag(f"configuration error: {exc}")
        return EXIT_CONFIG
    except CobraError as exc:
        _diag(f"error: {type(exc).__name__}: {exc}")
        return EXIT_INCOMPATIBLE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
