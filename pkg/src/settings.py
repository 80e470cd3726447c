# BSD 3-Clause License
#
# Copyright (c) 2024, The attr-desk developers. All rights reserved.
# Use of this source code is governed by the BSD 3-Clause License that can be
# found in the LICENSE file at the root of this repository.

"""settings.py: detector, training and dataset settings.

The user can change these settings in bin/config.ini, in a flat key = value
file given with --config_file, or by providing command line overrides.
Default settings are stored in src/default_config.ini.

scales:
  Scale factors of the image pyramid, comma separated. Default 0.5,1,2.

projection:
  The shared projection module: lp (linear patches), conv (convolution
  blocks) or res (residual blocks, the default).

res_blocks:
  Number of strided blocks after the stem for conv and res projections.
  Three blocks give a total stride of 16.

embed_dim:
  Token width c shared by every module.

patch_size:
  Patch side P of the linear patch projection.

encoder:
  transformer (deformable attention units) or conv (FPN-like conv encoder).

encoder_units:
  Number of encoder units (six by default).

heads:
  Attention heads of the deformable attention.

msda_points:
  Sampling points per head and level of the deformable attention.

text_embedding_source:
  Where the initial text embedding comes from: early (the projection's
  early map; an error for lp), stem (a dedicated conv stem) or auto (early
  when available, otherwise stem).

aggregation:
  pyramid aggregates the image pyramid levels; feature aggregates the last
  two stage maps of a single-scale res projection.

num_queries:
  Number of text queries N.

num_decoders:
  Number of scale-wise decoders; levels are visited round robin.

decoder_heads:
  Heads of the dense attention inside the decoders.

aux_loss:
  Supervise every intermediate decoder stage as well as the final one.

lr, weight_decay, backbone_lr_mult, lr_milestones, lr_gamma:
  AdamW with a step schedule. The learning rate is multiplied by lr_gamma at
  each milestone fraction of total_steps. Projection and encoder parameters
  use lr * backbone_lr_mult.

total_steps, batch_size:
  Training length and samples per step.

points_k, importance_ratio, oversample_ratio:
  Point sampling for the mask losses.

lambda_cls_matched, lambda_cls_unmatched:
  Classification weights for matched and unmatched queries.

aux_weight:
  Weight of each auxiliary stage loss.

augment:
  Apply random scaling, rotation, cropping and flipping during training.

save_every, log_every:
  Checkpoint and log periods in steps.

seed:
  Seed for dataset synthesis, initialisation and all per-step randomness.

image_height, image_width, min_instances, max_instances, curve_prob,
small_text_prob, num_images, val_fraction:
  Synthetic dataset parameters.

infer_short_side:
  Inference resizes the shorter image side to this many pixels; 0 keeps
  the input size.

conf_thresh, keep_largest_component, min_component_px, dp_tolerance:
  Post-processing of instance masks into polygons.

overlay:
  Write detection overlay images during inference.

iou_thresh, raster_res:
  Evaluation matching threshold and polygon rasterization resolution.

ablate_steps:
  Training steps for each configuration in an ablation run.
"""

# The settings - these are None until initialised by import_config
scales = None
projection = None
res_blocks = None
embed_dim = None
patch_size = None
encoder = None
encoder_units = None
heads = None
msda_points = None
text_embedding_source = None
aggregation = None
num_queries = None
num_decoders = None
decoder_heads = None
aux_loss = None
lr = None
weight_decay = None
backbone_lr_mult = None
lr_milestones = None
lr_gamma = None
total_steps = None
batch_size = None
points_k = None
importance_ratio = None
oversample_ratio = None
lambda_cls_matched = None
lambda_cls_unmatched = None
aux_weight = None
augment = None
save_every = None
log_every = None
seed = None
image_height = None
image_width = None
min_instances = None
max_instances = None
curve_prob = None
small_text_prob = None
num_images = None
val_fraction = None
infer_short_side = None
conf_thresh = None
keep_largest_component = None
min_component_px = None
dp_tolerance = None
overlay = None
iou_thresh = None
raster_res = None
ablate_steps = None

# A reference to this module for retrieving its members; import sys like this
# so that it does not appear in _names_.
_module_ = __import__("sys").modules[__name__]

# The names of all the settings defined above.
_names_ = [s for s in dir(_module_) if not (s.startswith("_"))]

_INTS_ = {"res_blocks", "embed_dim", "patch_size", "encoder_units", "heads",
          "msda_points", "num_queries", "num_decoders", "decoder_heads",
          "total_steps", "batch_size", "points_k", "oversample_ratio",
          "save_every", "log_every", "seed", "image_height", "image_width",
          "min_instances", "max_instances", "num_images", "infer_short_side",
          "min_component_px", "raster_res", "ablate_steps"}
_FLOATS_ = {"lr", "weight_decay", "backbone_lr_mult", "lr_gamma",
            "importance_ratio", "lambda_cls_matched", "lambda_cls_unmatched",
            "aux_weight", "curve_prob", "small_text_prob", "val_fraction",
            "conf_thresh", "dp_tolerance", "iou_thresh"}
_LISTS_ = {"scales", "lr_milestones"}
_CHOICES_ = {"projection": ("lp", "conv", "res"),
             "encoder": ("transformer", "conv"),
             "text_embedding_source": ("auto", "early", "stem"),
             "aggregation": ("pyramid", "feature")}

# Set up the types of the various settings, so they can be converted
# correctly when being read from config.
_types_ = {n: ("int" if n in _INTS_ else
               "float" if n in _FLOATS_ else
               "floats" if n in _LISTS_ else
               "str" if n in _CHOICES_ else
               "bool") for n in _names_}

# A stack for saving and restoring setting configurations.
_stack_ = []

# _names_ is built from dir() above; everything imported or defined below
# this point stays out of it.
import configparser
import logging
import typing as t
from os.path import dirname, normpath, join

_dir_ = dirname(__file__)

# Default settings are stored here.
_DEFAULT_LOC_ = normpath(join(_dir_, "../src/default_config.ini"))

# User settings are located here, and will override default settings.
_CONFIG_LOC_ = normpath(join(_dir_, "../bin/config.ini"))


class ConfigError(ValueError):
    """An unknown setting, an unparseable value or an unbuildable combination."""


def _get_dict_():
    """
    Return the current module's dictionary of members so the settings can be
    dynamically accessed by name.
    """
    return _module_.__dict__


def save():
    """Push the current setting configuration to the stack."""
    sd = _get_dict_()
    _stack_.append({n: sd[n] for n in _names_})


def restore():
    """Restore the setting configuration from the top of the stack."""
    _get_dict_().update(_stack_.pop())


def set_from_string(setting_name: str, value: str):
    """
    Assign to the named setting the given value, first converting that value
    to the type appropriate for that setting.
    Names and values are not case sensitive.

    Raises:
      ConfigError: the setting is unknown or the value cannot be converted.
    """
    name = setting_name.strip().lower()
    val = value.strip().lower()

    if name not in _names_:
        logging.error('Unrecognised setting "%s".', setting_name)
        raise ConfigError('unrecognised setting "{}"'.format(setting_name))

    kind = _types_[name]
    try:
        if kind == "int":
            converted = int(val)
        elif kind == "float":
            converted = float(val)
        elif kind == "floats":
            converted = tuple(float(v) for v in val.split(",") if v.strip())
            if not converted:
                raise ValueError("empty list")
        elif kind == "str":
            if val not in _CHOICES_[name]:
                raise ValueError("expected one of " + "|".join(_CHOICES_[name]))
            converted = val
        elif val in {"1", "yes", "true", "on"}:
            converted = True
        elif val in {"0", "no", "false", "off"}:
            converted = False
        else:
            raise ValueError("not a boolean")
    except ValueError as e:
        logging.error('Cannot interpret value "%s" for setting "%s"',
                      value, setting_name)
        raise ConfigError('bad value "{}" for setting "{}": {}'
                          .format(value, setting_name, e)) from e

    _get_dict_()[name] = converted


def set_from_pairs(pairs: str):
    """
    Apply overrides written as "key1=value1, key2=value2".
    Commas inside list values are kept with the preceding key.
    """
    key = None
    for token in pairs.split(","):
        token = token.strip()
        if not token:
            continue
        if "=" in token:
            key, value = token.split("=", 1)
            set_from_string(key, value)
        elif key is not None and _types_.get(key.strip().lower()) == "floats":
            current = ",".join(str(v) for v in get(key.strip().lower()))
            set_from_string(key, current + "," + token)
        else:
            raise ConfigError('cannot parse override "{}"'.format(token))


def get(name: str) -> t.Any:
    """Return the current value of the named setting."""
    return _get_dict_()[name]


def as_dict() -> t.Dict[str, t.Any]:
    """Return all settings keyed by name."""
    sd = _get_dict_()
    return {n: sd[n] for n in _names_}


def format_value(value: t.Any) -> str:
    if isinstance(value, tuple):
        return ",".join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_run_config(path: str):
    """Write every setting as a flat key = value file."""
    with open(path, "w") as f:
        for name, value in sorted(as_dict().items()):
            f.write("{} = {}\n".format(name, format_value(value)))


def _read_text(filepath: str) -> str:
    with open(filepath) as f:
        text = f.read()
    # Flat key = value files have no section header.
    if not any(line.strip().startswith("[") for line in text.splitlines()):
        text = "[settings]\n" + text
    return text


def apply(values: t.Mapping[str, t.Any]):
    """Assign already-typed values, as returned by as_dict()."""
    sd = _get_dict_()
    for name, value in values.items():
        if name not in _names_:
            raise ConfigError('unrecognised setting "{}"'.format(name))
        sd[name] = value


def import_overrides(filepath: str):
    """
    Apply every setting in a key = value file on top of the current values,
    as written by write_run_config.

    Raises:
      ConfigError: the file holds an unknown setting or a bad value.
    """
    config = configparser.ConfigParser()
    try:
        config.read_string(_read_text(filepath), source=filepath)
    except configparser.Error as e:
        raise ConfigError("malformed config file {}: {}".format(filepath, e)) from e
    for section in config.sections():
        for key, value in config.items(section, raw=True):
            set_from_string(key, value)
    validate()


def import_config(filepath: str = _CONFIG_LOC_):
    """
    Import settings from the given configuration file, on top of the defaults.
    This should be called before building any model or dataset.

    Raises:
      ConfigError: the file holds an unknown setting or a bad value.
    """
    config = configparser.ConfigParser()
    with open(_DEFAULT_LOC_) as default:
        config.read_file(default)
    if filepath is not None:
        try:
            config.read_string(_read_text(filepath), source=filepath)
        except FileNotFoundError:
            logging.debug("No config file at %s, using defaults.", filepath)
        except configparser.Error as e:
            raise ConfigError("malformed config file {}: {}".format(filepath, e)) from e
    if not config.has_section("settings"):
        config.add_section("settings")
    for key in config.options("settings"):
        if key not in _names_:
            raise ConfigError('unrecognised setting "{}" in {}'.format(key, filepath))
    for name in _names_:
        set_from_string(name, config.get("settings", name))
    validate()


def validate():
    """Check cross-setting constraints that single values cannot express."""
    if embed_dim % 4 != 0:
        raise ConfigError("embed_dim must be divisible by 4")
    if embed_dim % heads != 0 or embed_dim % decoder_heads != 0:
        raise ConfigError("embed_dim must be divisible by heads and decoder_heads")
    if not 2 <= res_blocks <= 4:
        raise ConfigError("res_blocks must be between 2 and 4")
    if any(s <= 0 for s in scales):
        raise ConfigError("scales must be positive")
    if min_instances < 1 or max_instances < min_instances:
        raise ConfigError("need 1 <= min_instances <= max_instances")
    if not 0.0 <= importance_ratio <= 1.0:
        raise ConfigError("importance_ratio must lie in [0, 1]")
    if lambda_cls_matched < 0 or lambda_cls_unmatched < 0 or aux_weight < 0:
        raise ConfigError("loss weights must be non-negative")
