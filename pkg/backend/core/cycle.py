"""
Fitting Cycle
=============
Correspondence-guided style transfer for one (content, style) pair.

Stage A (once):
    - invert content and style, banking attention K/V (and style outputs)
    - reverse stylization: the style image re-rendered with the content's K/V
    - dense match content -> reverse-stylized style at (t*, l*)

Stage B (z = 1..Z):
    - structure latent: content x_T at z=1, the re-inverted previous output after
    - AdaIN against the style x_T
    - DDIM sampling with KV swap + correspondence injection
    - Sobel content loss / Gram style loss, stopping rule

Main entry point: run_cycle()
"""

import hashlib
import logging
import math
import threading
import time
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple, Union

import torch

from components.backbone import FeatureLocator, HookRegistry, LatentTensor
from components.correspondence import CorrespondenceMap, dense_match, resolve_locator
from components.errors import ConfigError, DimensionMismatchError, StageError, ValidationError
from components.injection import (
    InjectionConfig,
    KVSwapHook,
    StyleBank,
    build_injection_hooks,
    select_target_blocks,
)
from components.losses import LossEvaluator

logger = logging.getLogger(__name__)

STOP_THRESHOLD = 'threshold'
STOP_MAX_ITERS = 'max_iters'

ADAIN_EPS = 1e-5


# ============================================================================
# CONFIG AND STATE
# ============================================================================

@dataclass
class CycleConfig:
    tau_c: Optional[float] = None
    tau_s: Optional[float] = None
    max_iters: int = 5
    comparator: str = 'paper'            # 'paper' | 'conventional'
    adain_enabled: bool = True
    adaptive: bool = True
    matching: str = 'indirect'           # 'indirect' | 'direct'
    calibration_step: int = 3

    def __post_init__(self):
        if self.max_iters < 1:
            raise ConfigError("max_iters must be >= 1")
        if self.comparator not in ('paper', 'conventional'):
            raise ConfigError(f"Unknown comparator '{self.comparator}'")
        if self.matching not in ('indirect', 'direct'):
            raise ConfigError(f"Unknown matching mode '{self.matching}'")
        for name in ('tau_c', 'tau_s'):
            value = getattr(self, name)
            if value is not None and (not math.isfinite(value) or value < 0):
                raise ConfigError(f"{name} must be finite and >= 0, got {value}")

    @classmethod
    def from_config(cls, config: Dict) -> 'CycleConfig':
        options = config['cycle']
        return cls(
            tau_c=options.get('tau_c'),
            tau_s=options.get('tau_s'),
            max_iters=int(options['max_iters']),
            comparator=options.get('comparator', 'paper'),
            adain_enabled=bool(options.get('adain', True)),
            adaptive=bool(options.get('adaptive', True)),
            matching=options.get('matching', 'indirect'),
            calibration_step=int(options.get('calibration_step', 3)),
        )

    @property
    def calibrated(self) -> bool:
        return self.tau_c is not None and self.tau_s is not None


@dataclass
class CycleState:
    z: int = 0
    content_loss: Optional[float] = None
    style_loss: Optional[float] = None
    current_output: Optional[torch.Tensor] = None
    history: List[Dict] = field(default_factory=list)
    stop_reason: Optional[str] = None
    tau_c: Optional[float] = None
    tau_s: Optional[float] = None
    calibrated: bool = False
    calibration_run: bool = False

    def record(self, z: int, content_loss: Optional[float], style_loss: Optional[float],
               output: torch.Tensor, seconds: float = 0.0) -> None:
        if z != self.z + 1:
            raise ValueError(f"Iteration {z} recorded after {self.z}")
        self.z = z
        self.content_loss = content_loss
        self.style_loss = style_loss
        self.current_output = output
        self.history.append({
            'z': z,
            'content_loss': content_loss,
            'style_loss': style_loss,
            'seconds': round(seconds, 3),
        })

    def to_dict(self) -> Dict:
        return {
            'z': self.z,
            'stop_reason': self.stop_reason,
            'content_loss': self.content_loss,
            'style_loss': self.style_loss,
            'tau_c': self.tau_c,
            'tau_s': self.tau_s,
            'calibrated': self.calibrated,
            'calibration_run': self.calibration_run,
            'history': list(self.history),
        }


# ============================================================================
# PURE STEPS
# ============================================================================

def adain(content: Union[LatentTensor, torch.Tensor],
          style: Union[LatentTensor, torch.Tensor],
          eps: float = ADAIN_EPS) -> Union[LatentTensor, torch.Tensor]:
    """
    Per channel: sigma_s * (y_c - mu_c) / sigma_c + mu_s (population std).

    A channel with sigma_c <= eps is only centred, so it comes out as mu_s.
    """
    y_c = content.data if isinstance(content, LatentTensor) else content
    y_s = style.data if isinstance(style, LatentTensor) else style
    if y_c.dim() != 3 or y_s.dim() != 3 or y_c.shape[0] != y_s.shape[0]:
        raise DimensionMismatchError(
            f"AdaIN needs (C, H, W) inputs with equal channels, got {tuple(y_c.shape)} and {tuple(y_s.shape)}"
        )

    c = y_c.double().reshape(y_c.shape[0], -1)
    s = y_s.double().reshape(y_s.shape[0], -1)
    mu_c, sigma_c = c.mean(dim=1, keepdim=True), c.std(dim=1, unbiased=False, keepdim=True)
    mu_s, sigma_s = s.mean(dim=1, keepdim=True), s.std(dim=1, unbiased=False, keepdim=True)
    divisor = torch.where(sigma_c > eps, sigma_c, torch.ones_like(sigma_c))
    scale = torch.where(sigma_c > eps, sigma_s, torch.zeros_like(sigma_s))
    out = ((c - mu_c) / divisor * scale + mu_s).reshape(y_c.shape).to(y_c.dtype)

    if isinstance(content, LatentTensor):
        return content.with_data(out)
    return out


def should_stop(content_loss: Optional[float], style_loss: Optional[float],
                config: CycleConfig, z: int) -> Tuple[bool, Optional[str]]:
    """
    Stopping rule after iteration z.

    z == Z always stops (max_iters). Otherwise, with adaptive stopping on and
    thresholds set, 'paper' stops when L_content > tau_c and L_style < tau_s;
    'conventional' when L_content < tau_c and L_style < tau_s. A disabled loss
    (None) satisfies its clause.
    """
    for name, value in (('content', content_loss), ('style', style_loss)):
        if value is not None and not math.isfinite(value):
            raise ValidationError(f"{name} loss is not finite at iteration {z}")

    if z >= config.max_iters:
        return True, STOP_MAX_ITERS
    if not config.adaptive or not config.calibrated:
        return False, None

    if content_loss is None:
        content_ok = True
    elif config.comparator == 'paper':
        content_ok = content_loss > config.tau_c
    else:
        content_ok = content_loss < config.tau_c
    style_ok = True if style_loss is None else style_loss < config.tau_s

    if content_ok and style_ok:
        return True, STOP_THRESHOLD
    return False, None


def thresholds_from_history(history: List[Dict], step: int) -> Tuple[float, float]:
    """tau_c, tau_s taken from the losses of iteration ``step`` (clamped to the run)."""
    record = history[min(step, len(history)) - 1]
    tau_c = record['content_loss'] if record['content_loss'] is not None else 0.0
    tau_s = record['style_loss'] if record['style_loss'] is not None else 0.0
    return float(tau_c), float(tau_s)


def style_key(style_image: torch.Tensor) -> str:
    """Content digest of a style image; the same file loaded twice gives the same key."""
    data = style_image.detach().to('cpu', torch.float32).contiguous().numpy().tobytes()
    return hashlib.sha256(data).hexdigest()[:16]


class StyleThresholds:
    """
    (tau_c, tau_s) per style, set by that style's calibration pair and reused
    by every later pair of the same style. Safe to share between workers.
    """

    def __init__(self):
        self._values: Dict[str, Tuple[float, float]] = {}
        self._lock = threading.Lock()

    def get(self, key: str) -> Optional[Tuple[float, float]]:
        with self._lock:
            return self._values.get(key)

    def set(self, key: str, tau_c: float, tau_s: float) -> Tuple[float, float]:
        """First calibration of a style wins; returns the stored pair."""
        with self._lock:
            return self._values.setdefault(key, (tau_c, tau_s))

    def __contains__(self, key: str) -> bool:
        with self._lock:
            return key in self._values

    def __len__(self) -> int:
        with self._lock:
            return len(self._values)


# ============================================================================
# ENGINE
# ============================================================================

@dataclass
class PairContext:
    """Everything Stage A produces and Stage B reuses."""
    content_image: torch.Tensor
    style_image: torch.Tensor
    content_latent: LatentTensor
    style_latent: LatentTensor
    content_noise: LatentTensor
    style_noise: LatentTensor
    content_bank: StyleBank
    style_bank: StyleBank
    injection: InjectionConfig
    reverse_stylized: Optional[torch.Tensor] = None
    mapping: Optional[CorrespondenceMap] = None
    losses: Optional[LossEvaluator] = None


class StyleTransferEngine:
    """
    Runs the fitting cycle on a shared, read-only backbone.

    Each call builds its own hook registries and banks, so one engine can
    serve several worker threads. Calibrated thresholds live in a shared
    StyleThresholds keyed by style.
    """

    def __init__(self, backbone, config: Dict, loss_evaluator: Optional[LossEvaluator] = None,
                 locator: Optional[FeatureLocator] = None,
                 thresholds: Optional[StyleThresholds] = None):
        self.backbone = backbone
        self.config = config
        self.cycle = CycleConfig.from_config(config)
        self.losses = loss_evaluator
        self.locator = locator
        self.thresholds = thresholds if thresholds is not None else StyleThresholds()
        self.bank_device = config['backbone'].get('bank_device', 'cpu')
        self._layer_shapes: Dict[Tuple[int, int], Dict] = {}
        self._shapes_lock = threading.Lock()

    def _locator(self) -> FeatureLocator:
        if self.locator is None:
            self.locator = resolve_locator(self.config, self.backbone.checkpoint_id)
        return self.locator.validate(self.backbone.num_steps, self.backbone.layers)

    def layer_shapes(self, image_size: Tuple[int, int]) -> Dict:
        """inspect_layers, run once per image size."""
        image_size = tuple(image_size)
        with self._shapes_lock:
            if image_size not in self._layer_shapes:
                self._layer_shapes[image_size] = self.backbone.inspect_layers(image_size)
            return self._layer_shapes[image_size]

    def _injection_config(self, image_size: Tuple[int, int], locator: FeatureLocator) -> InjectionConfig:
        shapes = self.layer_shapes(image_size)
        attention = {b: shapes[b] for b in self.backbone.attention_blocks if b in shapes}
        feature_grid = shapes[locator.layer][1:] if locator.layer in shapes else None
        blocks = select_target_blocks(attention, feature_grid, self.config['injection'].get('blocks'))
        return InjectionConfig.from_config(self.config, blocks)

    def _stage(self, name: str, z: Optional[int], fn, *args):
        try:
            return fn(*args)
        except StageError:
            raise
        except Exception as e:
            logger.error(f"Stage {name} failed (iteration {z}): {e}")
            raise StageError(name, z, e) from e

    # -- Stage A ------------------------------------------------------------

    def prepare(self, content_image: torch.Tensor, style_image: torch.Tensor) -> PairContext:
        locator = self._locator()
        backbone = self.backbone

        def invert_both():
            content_latent = backbone.encode_image(content_image)
            style_latent = backbone.encode_image(style_image)
            injection = self._injection_config(content_latent.image_size, locator)

            content_bank = StyleBank(injection.target_blocks, backbone.num_steps, device=self.bank_device)
            content_traj = backbone.ddim_invert(content_latent, hooks=HookRegistry(content_bank.hooks()))
            style_bank = StyleBank.for_injection(injection, device=self.bank_device)
            style_traj = backbone.ddim_invert(style_latent, hooks=HookRegistry(style_bank.hooks()))
            logger.info(f"Inverted content and style ({backbone.num_steps} steps, "
                        f"{len(injection.target_blocks)} hooked blocks)")
            return PairContext(content_image, style_image, content_latent, style_latent,
                               content_traj[-1], style_traj[-1], content_bank, style_bank, injection)

        return self._stage('invert', None, invert_both)

    def reverse_stylize(self, ctx: PairContext) -> torch.Tensor:
        """Style image re-rendered with the content's keys and values."""
        def run():
            hooks = HookRegistry([KVSwapHook(ctx.content_bank, ctx.injection.gamma)])
            latent = self.backbone.ddim_sample(ctx.style_noise, hooks=hooks)
            return self.backbone.decode_latent(latent)

        ctx.reverse_stylized = self._stage('reverse_stylize', None, run)
        return ctx.reverse_stylized

    def match(self, ctx: PairContext) -> CorrespondenceMap:
        locator = self._locator()

        def run():
            target = ctx.reverse_stylized if self.cycle.matching == 'indirect' else ctx.style_image
            content_features = self.backbone.extract_features(ctx.content_image, locator, source='content')
            target_features = self.backbone.extract_features(target, locator, source=self.cycle.matching)
            return dense_match(content_features, target_features)

        ctx.mapping = self._stage('match', None, run)
        logger.info(f"Matched {len(ctx.mapping)} locations at t={locator.timestep} l={locator.layer} "
                    f"(mean score {float(ctx.mapping.scores.mean()):.3f})")
        return ctx.mapping

    # -- Stage B ------------------------------------------------------------

    def stylize_once(self, ctx: PairContext, z: int, previous: Optional[torch.Tensor] = None) -> torch.Tensor:
        """One Stage B sampling pass; returns the decoded image."""
        backbone = self.backbone

        def structure_latent():
            if z == 1 or previous is None:
                return ctx.content_noise
            latent = backbone.encode_image(previous.clamp(0, 1))
            return backbone.ddim_invert(latent)[-1]

        x_t = self._stage('reinvert', z, structure_latent)
        if self.cycle.adain_enabled:
            x_t = self._stage('adain', z, adain, x_t, ctx.style_noise)

        def sample():
            hooks = HookRegistry(build_injection_hooks(ctx.style_bank, ctx.mapping, ctx.injection))
            return backbone.decode_latent(backbone.ddim_sample(x_t, hooks=hooks))

        return self._stage('sample', z, sample)

    def evaluate(self, ctx: PairContext, image: torch.Tensor, z: int) -> Tuple[Optional[float], Optional[float]]:
        if ctx.losses is None:
            return None, None

        def run():
            return ctx.losses.content(image, ctx.content_image), ctx.losses.style(image)

        return self._stage('losses', z, run)

    def cycle_for(self, key: str) -> Tuple[CycleConfig, bool]:
        """
        The stopping configuration for one style and whether this pair has to
        calibrate it. Thresholds from the config win over calibrated ones.
        """
        if not self.cycle.adaptive or self.cycle.calibrated or self.losses is None:
            return self.cycle, False
        cached = self.thresholds.get(key)
        if cached is None:
            return self.cycle, True
        return replace(self.cycle, tau_c=cached[0], tau_s=cached[1]), False

    def run(self, content_image: torch.Tensor, style_image: torch.Tensor,
            key: Optional[str] = None) -> Tuple[torch.Tensor, CycleState]:
        key = key or style_key(style_image)
        cycle, calibrating = self.cycle_for(key)

        ctx = self.prepare(content_image, style_image)
        self.reverse_stylize(ctx)
        self.match(ctx)
        if self.losses is not None:
            ctx.losses = self._stage('losses', None, self.losses.for_style, style_image)

        state = CycleState(tau_c=cycle.tau_c, tau_s=cycle.tau_s,
                           calibrated=cycle.calibrated and not self.cycle.calibrated)
        outputs: List[torch.Tensor] = []

        previous = None
        for z in range(1, cycle.max_iters + 1):
            started = time.time()
            image = self.stylize_once(ctx, z, previous)
            content_loss, style_loss = self.evaluate(ctx, image, z)
            state.record(z, content_loss, style_loss, image, time.time() - started)
            outputs.append(image)
            logger.info(f"Iteration {z}: content={content_loss} style={style_loss}")

            # a calibration pair has no thresholds yet, so only max_iters fires
            stop, reason = should_stop(content_loss, style_loss, cycle, z)
            if stop:
                state.stop_reason = reason
                break
            previous = image

        if calibrating:
            state = calibrate_thresholds(state, outputs, cycle)
            self.thresholds.set(key, state.tau_c, state.tau_s)
        return state.current_output, state


def calibrate_thresholds(state: CycleState, outputs: List[torch.Tensor],
                         config: CycleConfig) -> CycleState:
    """
    Set tau_c/tau_s from the losses at ``calibration_step`` of a full-length
    run, then replay the stopping rule over that run's history and truncate it
    where the rule first fires.
    """
    if not state.history:
        raise ValidationError("Calibration needs at least one iteration")
    tau_c, tau_s = thresholds_from_history(state.history, config.calibration_step)
    tuned = replace(config, tau_c=tau_c, tau_s=tau_s)

    replay = CycleState(tau_c=tau_c, tau_s=tau_s, calibrated=True, calibration_run=True)
    for record, image in zip(state.history, outputs):
        replay.record(record['z'], record['content_loss'], record['style_loss'], image, record['seconds'])
        stop, reason = should_stop(record['content_loss'], record['style_loss'], tuned, record['z'])
        if stop:
            replay.stop_reason = reason
            break
    if replay.stop_reason is None:
        replay.stop_reason = STOP_MAX_ITERS
    logger.info(f"Calibrated tau_c={tau_c:.4f} tau_s={tau_s:.4f}; stopping at z={replay.z} ({replay.stop_reason})")
    return replay


def run_cycle(content_image: torch.Tensor, style_image: torch.Tensor, config: Dict,
              backbone=None, loss_evaluator: Optional[LossEvaluator] = None,
              locator: Optional[FeatureLocator] = None) -> Tuple[torch.Tensor, CycleState]:
    """
    Stylize ``content_image`` with ``style_image``.

    Args:
        content_image, style_image: (3, H, W) tensors in [0, 1]
        config: full config dict (see config.DEFAULT_CONFIG)
        backbone: loaded backbone; loaded from the config when omitted
        loss_evaluator: Sobel/Gram losses; built with a pretrained VGG19 when omitted
        locator: (t*, l*); read from config / locator cache when omitted

    Returns:
        (stylized image, CycleState)
    """
    if backbone is None:
        from components.backbone import load_backbone
        backbone = load_backbone(config)
    if loss_evaluator is None:
        from components.metrics import MetricSuite
        loss_evaluator = LossEvaluator.from_config(config, MetricSuite.from_config(config).vgg)
    engine = StyleTransferEngine(backbone, config, loss_evaluator, locator)
    return engine.run(content_image, style_image)
