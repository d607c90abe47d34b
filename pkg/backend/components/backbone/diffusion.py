"""
Stable Diffusion Backbone
Adapter over a pretrained latent-diffusion checkpoint: VAE encode/decode,
deterministic DDIM inversion and sampling, feature extraction and attention
capture. All passes are unconditional (empty prompt).
"""

import logging
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from components.errors import (
    CheckpointLoadError,
    DimensionMismatchError,
    InvalidLocatorError,
)
from .hooks import AttentionRecorder, HookRegistry, activate, install_processors
from .types import (
    AttentionBundle,
    AttentionRecord,
    DiffusionSchedule,
    FeatureLocator,
    FeatureMap,
    LatentTensor,
)

logger = logging.getLogger(__name__)

DTYPES = {
    'float32': torch.float32,
    'float16': torch.float16,
    'bfloat16': torch.bfloat16,
}


class StableDiffusionBackbone:
    """
    Wraps a VAE + U-Net pair.

    The checkpoint is treated as immutable once built; every per-run state
    (hooks, recorded banks) lives in HookRegistry objects passed per call.
    """

    def __init__(
        self,
        vae,
        unet,
        train_alphas_cumprod: Sequence[float],
        null_embedding: torch.Tensor,
        checkpoint_id: str = 'custom',
        num_steps: int = 50,
        seed: int = 0,
        device: str = 'cpu',
        layers: Optional[Sequence[str]] = None,
        steps_offset: int = 0,
        final_alpha_cumprod: Optional[float] = None,
        dtype: torch.dtype = torch.float32,
    ):
        self.vae = vae.to(device=device, dtype=dtype).eval()
        self.unet = unet.to(device=device, dtype=dtype).eval()
        self.vae.requires_grad_(False)
        self.unet.requires_grad_(False)

        self.checkpoint_id = checkpoint_id
        self.num_steps = int(num_steps)
        self.seed = int(seed)
        self.device = torch.device(device)
        self.dtype = dtype
        self.null_embedding = null_embedding.to(device=device, dtype=dtype)
        self.train_alphas_cumprod = np.asarray(
            train_alphas_cumprod.cpu().numpy() if torch.is_tensor(train_alphas_cumprod)
            else train_alphas_cumprod,
            dtype=np.float64,
        )
        self.steps_offset = steps_offset
        self.final_alpha_cumprod = final_alpha_cumprod

        self.decoder_layers = [f"up_blocks.{i}" for i in range(len(self.unet.up_blocks))]
        self.layers = list(layers) if layers else list(self.decoder_layers)
        missing = [l for l in self.layers if l not in self.decoder_layers]
        if missing:
            raise InvalidLocatorError(f"Candidate layers not in checkpoint decoder: {missing}")

        self.attention_blocks: List[str] = install_processors(self.unet)
        self._layer_shapes: Optional[Dict[str, Tuple[int, int, int]]] = None

    # ------------------------------------------------------------------
    # construction
    # ------------------------------------------------------------------

    @classmethod
    def from_config(cls, config: Dict) -> 'StableDiffusionBackbone':
        """
        Load the checkpoint named in ``config['backbone']['checkpoint']``.

        Any failure while fetching or instantiating weights surfaces as
        CheckpointLoadError.
        """
        options = config['backbone']
        checkpoint = options['checkpoint']
        device = options.get('device', 'cuda')
        if device.startswith('cuda') and not torch.cuda.is_available():
            logger.warning("CUDA requested but unavailable, falling back to CPU")
            device = 'cpu'
        dtype = DTYPES.get(options.get('dtype', 'float32'), torch.float32)

        try:
            from diffusers import AutoencoderKL, DDIMScheduler, UNet2DConditionModel
            from transformers import CLIPTextModel, CLIPTokenizer

            vae = AutoencoderKL.from_pretrained(checkpoint, subfolder='vae')
            unet = UNet2DConditionModel.from_pretrained(checkpoint, subfolder='unet')
            scheduler = DDIMScheduler.from_pretrained(checkpoint, subfolder='scheduler')
            tokenizer = CLIPTokenizer.from_pretrained(checkpoint, subfolder='tokenizer')
            text_encoder = CLIPTextModel.from_pretrained(checkpoint, subfolder='text_encoder')
        except Exception as e:
            raise CheckpointLoadError(f"Could not load checkpoint '{checkpoint}': {e}") from e

        with torch.no_grad():
            tokens = tokenizer(
                [''],
                padding='max_length',
                max_length=tokenizer.model_max_length,
                return_tensors='pt',
            )
            null_embedding = text_encoder(tokens.input_ids)[0]
        del text_encoder

        logger.info(f"Loaded checkpoint {checkpoint} on {device}")
        return cls(
            vae=vae,
            unet=unet,
            train_alphas_cumprod=scheduler.alphas_cumprod,
            null_embedding=null_embedding,
            checkpoint_id=checkpoint,
            num_steps=options['num_steps'],
            seed=options['seed'],
            device=device,
            layers=options.get('layers'),
            steps_offset=scheduler.config.get('steps_offset', 0),
            final_alpha_cumprod=float(scheduler.final_alpha_cumprod),
            dtype=dtype,
        )

    # ------------------------------------------------------------------
    # geometry
    # ------------------------------------------------------------------

    @property
    def downsample_factor(self) -> int:
        return 2 ** (len(self.vae.config.block_out_channels) - 1)

    @property
    def latent_channels(self) -> int:
        return int(self.vae.config.latent_channels)

    @property
    def scaling_factor(self) -> float:
        return float(getattr(self.vae.config, 'scaling_factor', 0.18215))

    def schedule(self, total_steps: Optional[int] = None) -> DiffusionSchedule:
        return DiffusionSchedule.from_training(
            self.train_alphas_cumprod,
            total_steps or self.num_steps,
            steps_offset=self.steps_offset,
            final_alpha_cumprod=self.final_alpha_cumprod,
        )

    def _check_schedule(self, schedule: Optional[DiffusionSchedule]) -> DiffusionSchedule:
        schedule = schedule or self.schedule()
        if schedule.total_steps != self.num_steps:
            raise DimensionMismatchError(
                f"Schedule has {schedule.total_steps} steps, backbone is configured for {self.num_steps}"
            )
        return schedule

    def _check_latent(self, latent: LatentTensor) -> None:
        channels, h, w = latent.shape
        expected = (latent.image_size[0] // self.downsample_factor,
                    latent.image_size[1] // self.downsample_factor)
        if channels != self.latent_channels or (h, w) != expected:
            raise DimensionMismatchError(
                f"Latent shape {latent.shape} does not match checkpoint geometry "
                f"({self.latent_channels}, {expected[0]}, {expected[1]})"
            )

    # ------------------------------------------------------------------
    # VAE
    # ------------------------------------------------------------------

    @torch.no_grad()
    def encode_image(self, image: torch.Tensor) -> LatentTensor:
        """
        Encode an RGB image.

        Args:
            image: (3, H, W) tensor with values in [0, 1]; H and W divisible
                   by the VAE downsampling factor

        Returns:
            LatentTensor of shape (latent_channels, H/f, W/f)
        """
        if image.dim() != 3 or image.shape[0] != 3:
            raise DimensionMismatchError(f"Expected a (3, H, W) image, got {tuple(image.shape)}")
        _, height, width = image.shape
        f = self.downsample_factor
        if height % f or width % f:
            raise DimensionMismatchError(
                f"Image size {height}x{width} is not divisible by the downsampling factor {f}"
            )
        if image.min() < 0 or image.max() > 1:
            raise DimensionMismatchError("Pixel values must lie in [0, 1]")

        pixels = (image * 2 - 1).unsqueeze(0).to(device=self.device, dtype=self.dtype)
        # posterior mean keeps encoding deterministic
        latent = self.vae.encode(pixels).latent_dist.mean * self.scaling_factor
        return LatentTensor(data=latent[0], image_size=(height, width)).check_finite()

    @torch.no_grad()
    def decode_latent(self, latent: LatentTensor) -> torch.Tensor:
        """Decode to a (3, H, W) image in [0, 1] at the latent's source resolution."""
        self._check_latent(latent)
        latent.check_finite()
        data = latent.data.unsqueeze(0).to(device=self.device, dtype=self.dtype)
        image = self.vae.decode(data / self.scaling_factor).sample[0]
        image = (image / 2 + 0.5).clamp(0, 1)
        return image.float().cpu()

    # ------------------------------------------------------------------
    # DDIM
    # ------------------------------------------------------------------

    def _eps(self, x: torch.Tensor, timestep: int) -> torch.Tensor:
        t = torch.tensor(int(timestep), device=self.device)
        return self.unet(x.unsqueeze(0), t, encoder_hidden_states=self.null_embedding).sample[0]

    @staticmethod
    def _ddim_move(x: torch.Tensor, eps: torch.Tensor, ab_from: float, ab_to: float) -> torch.Tensor:
        pred_x0 = (x - (1 - ab_from) ** 0.5 * eps) / ab_from ** 0.5
        return ab_to ** 0.5 * pred_x0 + (1 - ab_to) ** 0.5 * eps

    @torch.no_grad()
    def ddim_invert(
        self,
        latent: LatentTensor,
        schedule: Optional[DiffusionSchedule] = None,
        hooks: Optional[HookRegistry] = None
    ) -> List[LatentTensor]:
        """
        Deterministic DDIM inversion from the clean latent to noise.

        Returns:
            Trajectory of T+1 latents; index 0 is the input, index T the
            inverted noise. Inversion step i (1..T) evaluates the U-Net at
            the timestep of index i.
        """
        schedule = self._check_schedule(schedule)
        self._check_latent(latent)
        registry = hooks or HookRegistry()
        registry.validate(self.attention_blocks)
        registry.latent_grid = tuple(latent.shape[1:])
        ab = schedule.alphas_cumprod

        x = latent.data.to(device=self.device, dtype=self.dtype)
        trajectory = [latent]
        with activate(registry):
            for i in range(1, schedule.total_steps + 1):
                timestep = int(schedule.timesteps[i - 1])
                registry.set_position('invert', i, timestep)
                eps = self._eps(x, timestep)
                x = self._ddim_move(x, eps, ab[i - 1], ab[i])
                trajectory.append(latent.with_data(x).check_finite(timestep))
        return trajectory

    @torch.no_grad()
    def ddim_sample(
        self,
        start: LatentTensor,
        schedule: Optional[DiffusionSchedule] = None,
        hooks: Optional[HookRegistry] = None
    ) -> LatentTensor:
        """
        Deterministic DDIM sampling from the t=T latent back to t=0.

        Sampling step k (1..T) moves index T-k+1 to T-k and evaluates the
        U-Net at that index's timestep, so step k sees the same timestep tag
        as inversion step T-k+1.
        """
        schedule = self._check_schedule(schedule)
        self._check_latent(start)
        registry = hooks or HookRegistry()
        registry.validate(self.attention_blocks)
        registry.latent_grid = tuple(start.shape[1:])
        ab = schedule.alphas_cumprod
        total = schedule.total_steps

        x = start.data.to(device=self.device, dtype=self.dtype)
        with activate(registry):
            for k in range(1, total + 1):
                i = total - k + 1
                timestep = int(schedule.timesteps[i - 1])
                registry.set_position('sample', k, timestep)
                eps = self._eps(x, timestep)
                x = self._ddim_move(x, eps, ab[i], ab[i - 1])
                start.with_data(x).check_finite(timestep)
        return start.with_data(x)

    # ------------------------------------------------------------------
    # features and attention
    # ------------------------------------------------------------------

    def _noised(self, latent: LatentTensor, index: int, schedule: DiffusionSchedule) -> torch.Tensor:
        generator = torch.Generator(device='cpu').manual_seed(self.seed)
        noise = torch.randn(latent.shape, generator=generator).to(device=self.device, dtype=self.dtype)
        ab = float(schedule.alphas_cumprod[index])
        x0 = latent.data.to(device=self.device, dtype=self.dtype)
        return ab ** 0.5 * x0 + (1 - ab) ** 0.5 * noise

    @torch.no_grad()
    def extract_features(self, image: torch.Tensor, locator: FeatureLocator,
                         source: str = '') -> FeatureMap:
        """
        Decoder activation at (timestep, layer) for an image.

        The clean latent is noised to the locator's timestep with a fixed,
        seed-derived noise draw and passed once through the U-Net; the output
        of decoder block ``locator.layer`` is the feature map.
        """
        locator.validate(self.num_steps, self.layers)
        schedule = self.schedule()
        latent = self.encode_image(image)
        return self.latent_features(latent, locator, schedule, source)

    @torch.no_grad()
    def latent_features(self, latent: LatentTensor, locator: FeatureLocator,
                        schedule: Optional[DiffusionSchedule] = None,
                        source: str = '') -> FeatureMap:
        locator.validate(self.num_steps, self.layers)
        schedule = schedule or self.schedule()
        x_t = self._noised(latent, locator.timestep, schedule)
        block = self.unet.up_blocks[int(locator.layer.split('.')[-1])]

        captured = {}

        def grab(module, inputs, output):
            captured['features'] = output[0] if isinstance(output, tuple) else output

        handle = block.register_forward_hook(grab)
        try:
            with activate(None):
                self._eps(x_t, int(schedule.timesteps[locator.timestep - 1]))
        finally:
            handle.remove()

        features = captured['features'][0].float().cpu()
        return FeatureMap(locator=locator, data=features, source=source)

    @torch.no_grad()
    def capture_attention(self, latent: LatentTensor, timestep: int) -> AttentionBundle:
        """
        One U-Net pass at trajectory index ``timestep`` recording Q/K/V of
        every decoder self-attention block. Read-only.
        """
        if not 1 <= timestep <= self.num_steps:
            raise InvalidLocatorError(f"Timestep {timestep} outside [1, {self.num_steps}]")
        self._check_latent(latent)
        schedule = self.schedule()
        recorder = AttentionRecorder(fields=('query', 'key', 'value'), device='cpu')
        registry = HookRegistry([recorder])
        registry.latent_grid = tuple(latent.shape[1:])
        train_t = int(schedule.timesteps[timestep - 1])
        registry.set_position('probe', timestep, train_t)

        with activate(registry):
            self._eps(latent.data.to(device=self.device, dtype=self.dtype), train_t)

        records = []
        for block in self.attention_blocks:
            entry = recorder.records.get((block, train_t))
            if entry is None:
                continue
            records.append(AttentionRecord(
                block=block,
                query=entry['query'],
                key=entry['key'],
                value=entry['value'],
                heads=recorder.heads[block],
            ))
        return AttentionBundle(timestep=timestep, records=records)

    @torch.no_grad()
    def inspect_layers(self, image_size: Optional[Tuple[int, int]] = None) -> Dict[str, Tuple[int, int, int]]:
        """
        Channel count and spatial size of every decoder layer and of every
        decoder self-attention block's output, for a given image size.
        """
        if self._layer_shapes is not None and image_size is None:
            return self._layer_shapes

        height, width = image_size or (512, 512)
        f = self.downsample_factor
        latent = LatentTensor(
            data=torch.zeros(self.latent_channels, height // f, width // f),
            image_size=(height, width),
        )
        shapes: Dict[str, Tuple[int, int, int]] = {}
        handles = []
        for name in self.decoder_layers:
            block = self.unet.up_blocks[int(name.split('.')[-1])]

            def grab(module, inputs, output, name=name):
                out = output[0] if isinstance(output, tuple) else output
                shapes[name] = tuple(int(s) for s in out.shape[1:])
            handles.append(block.register_forward_hook(grab))

        recorder = AttentionRecorder(fields=('output',), device='cpu')
        registry = HookRegistry([recorder])
        registry.latent_grid = tuple(latent.shape[1:])
        registry.set_position('probe', 1, int(self.schedule().timesteps[0]))
        try:
            with activate(registry):
                self._eps(latent.data.to(device=self.device, dtype=self.dtype), registry.timestep)
        finally:
            for handle in handles:
                handle.remove()

        for block in self.attention_blocks:
            grid = recorder.grids.get(block)
            if grid is None:
                continue
            heads = recorder.heads[block]
            head_dim = recorder.get(block, registry.timestep, 'output').shape[-1]
            shapes[block] = (heads * head_dim, grid[0], grid[1])

        if image_size is None:
            self._layer_shapes = shapes
        return shapes
