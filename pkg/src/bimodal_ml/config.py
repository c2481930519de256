"""YAML experiment configs: strict schema, dotted-path error messages.

Unknown keys are hard errors so a typo in an ablation config fails loudly
instead of silently running the defaults.
"""

import dataclasses
import os

import yaml

from .backbones import BranchSpec
from .data import DatasetSpec, bundled_mapping_path
from .errors import InvalidConfigError
from .losses import LossWeights
from .trainer import REGIMES, TrainConfig

EVAL_MODES = ("intra", "inter")
BUNDLED_PREFIX = "bundled:"
DEFAULT_COMPARE_REGIMES = REGIMES
DEFAULT_COMPARE_SEEDS = (0, 1, 2, 3, 4)

_TOP_KEYS = ("dataset", "branches", "training", "evaluation", "compare", "output")
_TUPLE_FIELDS = ("widths", "fusion_sites", "label_names")


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
    dataset_spec: DatasetSpec | None
    manifest: str | None
    manifest_label_names: tuple | None
    image_branch: BranchSpec
    text_branch: BranchSpec
    training: TrainConfig
    eval_mode: str
    mapping_path: str | None
    out_dir: str
    compare_regimes: tuple = DEFAULT_COMPARE_REGIMES
    compare_seeds: tuple = DEFAULT_COMPARE_SEEDS

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["dataset_spec"] = self.dataset_spec.to_dict() if self.dataset_spec else None
        d["image_branch"] = dataclasses.asdict(self.image_branch)
        d["text_branch"] = dataclasses.asdict(self.text_branch)
        d["training"] = dataclasses.asdict(self.training)
        return d


def _require_mapping_node(node, path):
    if not isinstance(node, dict):
        raise InvalidConfigError(f"{path}: expected a mapping, got {type(node).__name__}")
    return node


def _check_keys(node, allowed, path):
    unknown = [k for k in node if k not in allowed]
    if unknown:
        raise InvalidConfigError(
            f"{path}: unknown key {unknown[0]!r} (allowed: {sorted(allowed)})"
        )


def _build_dataclass(cls, node, path, coerce=()):
    names = {f.name for f in dataclasses.fields(cls)}
    _check_keys(node, names, path)
    kwargs = {}
    for key, value in node.items():
        if key in coerce and isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except InvalidConfigError as err:
        raise InvalidConfigError(f"{path}: {err}") from err
    except TypeError as err:
        raise InvalidConfigError(f"{path}: {err}") from err


def _parse_dataset(node, base_dir):
    node = _require_mapping_node(node, "dataset")
    _check_keys(node, ("spec", "manifest", "label_names"), "dataset")
    has_spec = "spec" in node
    has_manifest = "manifest" in node
    if has_spec == has_manifest:
        raise InvalidConfigError("dataset: provide exactly one of 'spec' or 'manifest'")
    if has_spec:
        if "label_names" in node:
            raise InvalidConfigError(
                "dataset.label_names: only valid with 'manifest' (use spec.label_names)"
            )
        spec_node = _require_mapping_node(node["spec"], "dataset.spec")
        spec = _build_dataclass(DatasetSpec, spec_node, "dataset.spec", coerce=_TUPLE_FIELDS)
        return spec, None, None
    manifest = os.path.normpath(os.path.join(base_dir, str(node["manifest"])))
    if not os.path.isfile(manifest):
        raise InvalidConfigError(f"dataset.manifest: file not found: {manifest}")
    names = node.get("label_names")
    if names is not None:
        names = tuple(str(n) for n in names)
    return None, manifest, names


def _parse_branches(node):
    node = _require_mapping_node(node, "branches")
    _check_keys(node, ("image", "text"), "branches")
    for side in ("image", "text"):
        if side not in node:
            raise InvalidConfigError(f"branches.{side}: required")
    image = _build_dataclass(
        BranchSpec,
        _require_mapping_node(node["image"], "branches.image"),
        "branches.image",
        coerce=_TUPLE_FIELDS,
    )
    text = _build_dataclass(
        BranchSpec,
        _require_mapping_node(node["text"], "branches.text"),
        "branches.text",
        coerce=_TUPLE_FIELDS,
    )
    for field in ("feature_dim", "n_classes", "fusion_sites"):
        if getattr(image, field) != getattr(text, field):
            raise InvalidConfigError(
                f"branches: image and text must agree on {field} "
                f"({getattr(image, field)} vs {getattr(text, field)})"
            )
    return image, text


def _parse_training(node):
    node = _require_mapping_node(node, "training")
    node = dict(node)
    if "weights" in node:
        weights = node["weights"]
        if not isinstance(weights, (list, tuple)) or len(weights) != 3:
            raise InvalidConfigError("training.weights: expected a list of 3 numbers")
        try:
            node["weights"] = LossWeights(*[float(w) for w in weights])
        except InvalidConfigError as err:
            raise InvalidConfigError(f"training.weights: {err}") from err
    return _build_dataclass(TrainConfig, node, "training")


def resolve_mapping_path(value, base_dir):
    """'bundled:NAME' resolves to the packaged CSV; anything else is a path
    relative to the config file."""
    value = str(value)
    if value.startswith(BUNDLED_PREFIX):
        try:
            path = bundled_mapping_path(value[len(BUNDLED_PREFIX) :])
        except ValueError as err:
            raise InvalidConfigError(f"evaluation.mapping: file not found: {err}") from err
    else:
        path = os.path.normpath(os.path.join(base_dir, value))
    path = str(path)
    if not os.path.isfile(path):
        raise InvalidConfigError(f"evaluation.mapping: file not found: {path}")
    return path


def _parse_evaluation(node, base_dir):
    node = _require_mapping_node(node, "evaluation")
    _check_keys(node, ("mode", "mapping"), "evaluation")
    mode = node.get("mode", "intra")
    if mode not in EVAL_MODES:
        raise InvalidConfigError(f"evaluation.mode: must be one of {EVAL_MODES}, got {mode!r}")
    mapping = node.get("mapping")
    if mode == "inter" and mapping is None:
        raise InvalidConfigError("evaluation.mapping: required when mode is 'inter'")
    if mode == "intra" and mapping is not None:
        raise InvalidConfigError("evaluation.mapping: only valid when mode is 'inter'")
    path = resolve_mapping_path(mapping, base_dir) if mapping is not None else None
    return mode, path


def _parse_compare(node):
    if node is None:
        return DEFAULT_COMPARE_REGIMES, DEFAULT_COMPARE_SEEDS
    node = _require_mapping_node(node, "compare")
    _check_keys(node, ("regimes", "seeds"), "compare")
    regimes = tuple(node.get("regimes", DEFAULT_COMPARE_REGIMES))
    for regime in regimes:
        if regime not in REGIMES:
            raise InvalidConfigError(
                f"compare.regimes: unknown regime {regime!r} (allowed: {list(REGIMES)})"
            )
    if len(regimes) != len(set(regimes)):
        raise InvalidConfigError("compare.regimes: duplicates not allowed")
    seeds = node.get("seeds", DEFAULT_COMPARE_SEEDS)
    if not isinstance(seeds, (list, tuple)) or not seeds:
        raise InvalidConfigError("compare.seeds: expected a non-empty list of integers")
    try:
        seeds = tuple(int(s) for s in seeds)
    except (TypeError, ValueError) as err:
        raise InvalidConfigError(f"compare.seeds: {err}") from err
    return regimes, seeds


def _parse_output(node):
    node = _require_mapping_node(node, "output")
    _check_keys(node, ("dir",), "output")
    if "dir" not in node:
        raise InvalidConfigError("output.dir: required")
    return str(node["dir"])


def parse_config(raw, base_dir) -> ExperimentConfig:
    raw = _require_mapping_node(raw, "config")
    _check_keys(raw, _TOP_KEYS, "config")
    for section in ("dataset", "branches", "training", "evaluation", "output"):
        if section not in raw:
            raise InvalidConfigError(f"{section}: section required")
    spec, manifest, manifest_names = _parse_dataset(raw["dataset"], base_dir)
    image, text = _parse_branches(raw["branches"])
    training = _parse_training(raw["training"])
    mode, mapping_path = _parse_evaluation(raw["evaluation"], base_dir)
    regimes, seeds = _parse_compare(raw.get("compare"))
    out_dir = _parse_output(raw["output"])
    if spec is not None:
        if image.n_classes != spec.n_classes:
            raise InvalidConfigError(
                f"branches: n_classes {image.n_classes} does not match "
                f"dataset.spec.n_classes {spec.n_classes}"
            )
        if text.vocab_size < spec.vocab_size:
            raise InvalidConfigError(
                f"branches.text.vocab_size: {text.vocab_size} is smaller than "
                f"dataset.spec.vocab_size {spec.vocab_size}"
            )
        if spec.image_size < 2 ** (image.n_blocks - 1):
            raise InvalidConfigError(
                "branches.image: too many downsampling blocks for "
                f"dataset.spec.image_size {spec.image_size}"
            )
    return ExperimentConfig(
        dataset_spec=spec,
        manifest=manifest,
        manifest_label_names=manifest_names,
        image_branch=image,
        text_branch=text,
        training=training,
        eval_mode=mode,
        mapping_path=mapping_path,
        out_dir=out_dir,
        compare_regimes=regimes,
        compare_seeds=seeds,
    )


def load_config(path) -> ExperimentConfig:
    if not os.path.isfile(path):
        raise InvalidConfigError(f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        try:
            raw = yaml.safe_load(fh)
        except yaml.YAMLError as err:
            raise InvalidConfigError(f"config: not valid YAML: {err}") from err
    return parse_config(raw, os.path.dirname(os.path.abspath(path)))


def validate_config(path):
    """All invariant violations as strings, each carrying a config path."""
    if not os.path.isfile(path):
        return [f"config file not found: {path}"]
    with open(path, "r", encoding="utf-8") as fh:
        try:
            raw = yaml.safe_load(fh)
        except yaml.YAMLError as err:
            return [f"config: not valid YAML: {err}"]
    base_dir = os.path.dirname(os.path.abspath(path))
    errors = []
    try:
        raw = _require_mapping_node(raw, "config")
        _check_keys(raw, _TOP_KEYS, "config")
    except InvalidConfigError as err:
        return [str(err)]
    for section in ("dataset", "branches", "training", "evaluation", "output"):
        if section not in raw:
            errors.append(f"{section}: section required")
    parsers = {
        "dataset": lambda n: _parse_dataset(n, base_dir),
        "branches": _parse_branches,
        "training": _parse_training,
        "evaluation": lambda n: _parse_evaluation(n, base_dir),
        "compare": _parse_compare,
        "output": _parse_output,
    }
    for section, parser in parsers.items():
        if section in raw or section == "compare":
            try:
                parser(raw.get(section))
            except InvalidConfigError as err:
                errors.append(str(err))
    if not errors:
        try:
            parse_config(raw, base_dir)
        except InvalidConfigError as err:
            errors.append(str(err))
    return errors


def resolve_out_dir(cfg: ExperimentConfig, override=None, env=None):
    """--out wins; else output.dir, rooted at $BIMODAL_ML_OUT_ROOT when relative."""
    env = os.environ if env is None else env
    out = override if override is not None else cfg.out_dir
    if os.path.isabs(out):
        return out
    root = env.get("BIMODAL_ML_OUT_ROOT", "")
    return os.path.normpath(os.path.join(root, out)) if root else os.path.normpath(out)
