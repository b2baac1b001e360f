import hashlib
import io
import json
import logging
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from config import FORMAT_VERSION
from models import ModelConfig, ShapeError
from utils.frames import atomic_write_bytes

logger = logging.getLogger(__name__)

# Logit of the centre tap at initialisation of the cross-convolution head
CROSS_CONV_CENTER_LOGIT = 8.0


def conv_block(in_channels, out_channels, stride, slope, kernel_size=3):
    return nn.Sequential(
        nn.Conv2d(in_channels, out_channels, kernel_size, stride=stride, padding=kernel_size // 2),
        nn.BatchNorm2d(out_channels),
        nn.LeakyReLU(slope),
    )


def spatial_transform(m, theta):
    """
    Warp feature maps with affine transforms (inverse warping, bilinear, zero padding)

    For each output pixel at normalized coordinate p the input is sampled at
    theta @ (p, 1). Coordinates follow align_corners=False. The grid is built
    and sampled in float64 and cast back, so an identity theta reproduces the
    input and integer-pixel translations move mass without float32 drift.

    Args:
        m (torch.Tensor): (H, W) single map or (N, 1, H, W) batch of maps
        theta (torch.Tensor): (2, 3) or (N, 2, 3)

    Returns:
        torch.Tensor: Warped maps with the shape of m
    """
    single = m.dim() == 2
    if single:
        m = m.unsqueeze(0).unsqueeze(0)
    if theta.dim() == 2:
        theta = theta.unsqueeze(0).expand(m.shape[0], 2, 3)
    if m.dim() != 4 or theta.shape != (m.shape[0], 2, 3):
        raise ShapeError(f"spatial_transform got maps {tuple(m.shape)} and theta {tuple(theta.shape)}")
    grid = F.affine_grid(theta.to(torch.float64), list(m.shape), align_corners=False)
    out = F.grid_sample(m.to(torch.float64), grid, mode='bilinear', padding_mode='zeros',
                        align_corners=False).to(m.dtype)
    return out[0, 0] if single else out


def cross_convolve(maps, kernels):
    """
    Per-sample, per-map convolution of maps (B, n, H, W) with kernels (B, n, k, k)
    """
    b, n, h, w = maps.shape
    k = kernels.shape[-1]
    out = F.conv2d(maps.reshape(1, b * n, h, w), kernels.reshape(b * n, 1, k, k).to(maps.dtype),
                   padding=k // 2, groups=b * n)
    return out.reshape(b, n, h, w)


def translation_theta(params):
    """(..., 2) translations -> (..., 2, 3) matrices with an identity linear part"""
    eye = torch.eye(2, dtype=params.dtype, device=params.device).expand(*params.shape[:-1], 2, 2)
    return torch.cat([eye, params.unsqueeze(-1)], dim=-1)


def identity_theta(*batch, dtype=torch.float32, device=None):
    theta = torch.zeros(*batch, 2, 3, dtype=dtype, device=device)
    theta[..., 0, 0] = 1.0
    theta[..., 1, 1] = 1.0
    return theta


def content_displacement_px(motion, config):
    """
    Pixel displacement of map content implied by a motion, in image coordinates

    Under inverse warping a translation t moves content by -t (normalized
    units, half the image per unit). For a cross-convolution kernel the content
    moves against the kernel's centre of mass.

    Args:
        motion (torch.Tensor): (..., 2, 3) affine or (..., k, k) kernel
        config (ModelConfig): Model configuration

    Returns:
        torch.Tensor: (..., 2) displacement (dx, dy) in image pixels
    """
    motion = torch.as_tensor(motion, dtype=torch.float32)
    if config.use_stn:
        linear = motion[..., :2]
        t = motion[..., 2:]
        shift = -torch.linalg.solve(linear, t).squeeze(-1)
        return shift * config.image_size / 2.0
    k = motion.shape[-1]
    offsets = torch.arange(k, dtype=torch.float32) - k // 2
    weights = motion / motion.sum(dim=(-2, -1), keepdim=True).clamp_min(1e-12)
    mean_dx = (weights.sum(dim=-2) * offsets).sum(dim=-1)
    mean_dy = (weights.sum(dim=-1) * offsets).sum(dim=-1)
    scale = config.image_size / config.map_size
    return -torch.stack([mean_dx, mean_dy], dim=-1) * scale


class ImageEncoder(nn.Module):
    """7 conv layers: RGB frame -> n_maps feature maps at map_size"""

    def __init__(self, config):
        super().__init__()
        self.upsample_before = set(config.encoder_upsample_before)
        layers = []
        in_channels = 3
        last = len(config.encoder_channels) - 1
        for index, (out_channels, stride) in enumerate(zip(config.encoder_channels, config.encoder_strides)):
            if index == last:
                layers.append(nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1))
            else:
                layers.append(conv_block(in_channels, out_channels, stride, config.leaky_slope))
            in_channels = out_channels
        self.layers = nn.ModuleList(layers)

    def forward(self, x):
        for index, layer in enumerate(self.layers, start=1):
            if index in self.upsample_before:
                x = F.interpolate(x, scale_factor=2, mode='nearest')
            x = layer(x)
        return x


class MotionEncoder(nn.Module):
    """7 conv layers + 2 fully connected layers: frame pair -> one motion per map"""

    def __init__(self, config):
        super().__init__()
        self.config = config
        layers = []
        in_channels = 6
        for out_channels, stride in zip(config.motion_channels, config.motion_strides):
            layers.append(conv_block(in_channels, out_channels, stride, config.leaky_slope))
            in_channels = out_channels
        self.convs = nn.Sequential(*layers)

        reduction = 1
        for stride in config.motion_strides:
            reduction *= stride
        spatial = config.image_size // reduction
        self.fc1 = nn.Linear(in_channels * spatial * spatial, config.motion_hidden)
        self.act = nn.LeakyReLU(config.leaky_slope)
        self.fc2 = nn.Linear(config.motion_hidden, config.n_maps * config.motion_params)
        self.reset_head()

    def reset_head(self):
        """Zero weights and an identity bias, so an untrained encoder emits identity motions"""
        config = self.config
        nn.init.zeros_(self.fc2.weight)
        bias = torch.zeros(config.n_maps, config.motion_params)
        if not config.use_stn:
            k = config.cross_conv_kernel
            bias[:, (k // 2) * k + k // 2] = CROSS_CONV_CENTER_LOGIT
        elif not config.translation_only:
            bias[:] = torch.tensor([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])
        with torch.no_grad():
            self.fc2.bias.copy_(bias.flatten())

    def forward(self, x_t, x_next):
        config = self.config
        h = self.convs(torch.cat([x_t, x_next], dim=1))
        h = self.act(self.fc1(h.flatten(1)))
        raw = self.fc2(h).view(-1, config.n_maps, config.motion_params)
        if not config.use_stn:
            k = config.cross_conv_kernel
            return F.softmax(raw, dim=-1).view(-1, config.n_maps, k, k)
        if config.translation_only:
            return translation_theta(raw)
        return raw.view(-1, config.n_maps, 2, 3)


class ImageDecoder(nn.Module):
    """5 conv layers: transformed maps -> RGB frame in [-1, 1]"""

    def __init__(self, config):
        super().__init__()
        self.upsample_before = set(config.decoder_upsample_before)
        layers = []
        in_channels = config.n_maps
        last = len(config.decoder_channels) - 1
        for index, out_channels in enumerate(config.decoder_channels):
            if index == last:
                layers.append(nn.Conv2d(in_channels, out_channels, 3, padding=1))
            else:
                layers.append(conv_block(in_channels, out_channels, 1, config.leaky_slope))
            in_channels = out_channels
        self.layers = nn.ModuleList(layers)

    def forward(self, maps):
        x = maps
        for index, layer in enumerate(self.layers, start=1):
            if index in self.upsample_before:
                x = F.interpolate(x, scale_factor=2, mode='nearest')
            x = layer(x)
        return torch.tanh(x)


class InteractionLearner(nn.Module):
    """
    5 strided conv + 5 transposed conv layers with skip connections

    Input channels: x_{t-1} (3), x_t (3) and the transformed agent map upsampled
    to frame size (1).
    """

    def __init__(self, config):
        super().__init__()
        slope = config.leaky_slope
        channels = list(config.interaction_channels)
        self.down = nn.ModuleList()
        in_channels = 7
        for out_channels in channels:
            self.down.append(nn.Sequential(
                nn.Conv2d(in_channels, out_channels, 4, stride=2, padding=1),
                nn.BatchNorm2d(out_channels),
                nn.LeakyReLU(slope),
            ))
            in_channels = out_channels

        skips = list(reversed(channels[:-1]))
        outs = skips + [3]
        self.up = nn.ModuleList()
        for index, out_channels in enumerate(outs):
            in_channels = channels[-1] if index == 0 else outs[index - 1] + skips[index - 1]
            if index == len(outs) - 1:
                self.up.append(nn.ConvTranspose2d(in_channels, out_channels, 4, stride=2, padding=1))
            else:
                self.up.append(nn.Sequential(
                    nn.ConvTranspose2d(in_channels, out_channels, 4, stride=2, padding=1),
                    nn.BatchNorm2d(out_channels),
                    nn.LeakyReLU(slope),
                ))

    def forward(self, x):
        features = []
        for layer in self.down:
            x = layer(x)
            features.append(x)
        skips = list(reversed(features[:-1]))
        for index, layer in enumerate(self.up):
            if index > 0:
                x = torch.cat([x, skips[index - 1]], dim=1)
            x = layer(x)
        return torch.tanh(x)


class WorldModel(nn.Module):
    """
    Object extractor (image encoder, motion encoder, spatial transformers,
    image decoder) plus interaction learner.

    Frames are (B, 3, H, W) tensors in [-1, 1]; unbatched (3, H, W) inputs are
    accepted and returned unbatched.
    """

    def __init__(self, config=None):
        super().__init__()
        self.config = config or ModelConfig()
        self.image_encoder = ImageEncoder(self.config)
        self.motion_encoder = MotionEncoder(self.config)
        self.image_decoder = ImageDecoder(self.config)
        self.interaction_learner = InteractionLearner(self.config)

    def _frames(self, x, name):
        size = self.config.image_size
        if x.dim() == 3:
            x = x.unsqueeze(0)
        if x.dim() != 4 or tuple(x.shape[1:]) != (3, size, size):
            raise ShapeError(f"{name} must be (B, 3, {size}, {size}), got {tuple(x.shape)}")
        return x

    def _maps(self, m, name, channels):
        size = self.config.map_size
        if m.dim() == 2:
            m = m.unsqueeze(0)
        if m.dim() == 3 and channels == 1:
            m = m.unsqueeze(1)
        if m.dim() != 4 or tuple(m.shape[1:]) != (channels, size, size):
            raise ShapeError(f"{name} must be (B, {channels}, {size}, {size}), got {tuple(m.shape)}")
        return m

    def encode_image(self, x):
        """Frame -> (B, n_maps, map_size, map_size) feature maps"""
        unbatched = x.dim() == 3
        maps = self.image_encoder(self._frames(x, 'x'))
        return maps[0] if unbatched else maps

    def encode_motion(self, x_t, x_next):
        """Frame pair -> (B, n_maps, 2, 3) affine transforms, or (B, n_maps, k, k) kernels in the ablation"""
        unbatched = x_t.dim() == 3
        motion = self.motion_encoder(self._frames(x_t, 'x_t'), self._frames(x_next, 'x_next'))
        return motion[0] if unbatched else motion

    def transform_maps(self, maps, motion):
        """Apply one motion per map: maps (B, n, H, W), motion (B, n, 2, 3) or (B, n, k, k)"""
        b, n, h, w = maps.shape
        if not self.config.use_stn:
            return cross_convolve(maps, motion)
        flat = spatial_transform(maps.reshape(b * n, 1, h, w), motion.reshape(b * n, 2, 3))
        return flat.reshape(b, n, h, w)

    def transform_agent_map(self, agent_map, phi_agent):
        """agent_map (B, 1, H, W); phi_agent (B, 2, 3) / (2, 3), or (B, k, k) / (k, k) kernels"""
        b = agent_map.shape[0]
        if phi_agent.dim() == 2:
            phi_agent = phi_agent.unsqueeze(0).expand(b, *phi_agent.shape)
        phi_agent = phi_agent.to(agent_map.device, agent_map.dtype)
        return self.transform_maps(agent_map, phi_agent.unsqueeze(1))

    def decode_image(self, maps):
        """(B, n_maps, map_size, map_size) -> (B, 3, image_size, image_size) in [-1, 1]"""
        unbatched = maps.dim() == 3
        maps = self._maps(maps, 'maps', self.config.n_maps)
        frame = self.image_decoder(maps)
        return frame[0] if unbatched else frame

    def interaction_predict(self, x_prev, x_curr, agent_map_next):
        """Predict x_{t+1} from the last two frames and the transformed agent map"""
        unbatched = x_curr.dim() == 3
        x_prev = self._frames(x_prev, 'x_prev')
        x_curr = self._frames(x_curr, 'x_curr')
        agent_map_next = self._maps(agent_map_next, 'agent_map_next', 1)
        size = self.config.image_size
        agent = F.interpolate(agent_map_next, size=(size, size), mode='bilinear', align_corners=False)
        frame = self.interaction_learner(torch.cat([x_prev, x_curr, agent], dim=1))
        return frame[0] if unbatched else frame

    def extractor_predict(self, x_t, x_next):
        """
        Object-extractor reconstruction x' of x_{t+1}

        Returns:
            tuple: (x', transformed maps, motion)
        """
        maps = self.encode_image(self._frames(x_t, 'x_t'))
        motion = self.encode_motion(self._frames(x_t, 'x_t'), self._frames(x_next, 'x_next'))
        moved = self.transform_maps(maps, motion)
        return self.image_decoder(moved), moved, motion

    def joint_predict(self, x_prev, x_curr, x_next):
        """Both training paths from one pass: (x', x'')"""
        x_extractor, moved, _ = self.extractor_predict(x_curr, x_next)
        x_interaction = self.interaction_predict(x_prev, x_curr, moved[:, 0:1])
        return x_extractor, x_interaction

    def forward(self, x_prev, x_curr, phi_agent):
        """
        Action-conditioned forward model: agent map of x_curr moved by phi_agent,
        then the interaction learner predicts the next frame
        """
        unbatched = x_curr.dim() == 3
        x_prev = self._frames(x_prev, 'x_prev')
        x_curr = self._frames(x_curr, 'x_curr')
        agent_map = self.image_encoder(x_curr)[:, 0:1]
        moved = self.transform_agent_map(agent_map, phi_agent)
        frame = self.interaction_predict(x_prev, x_curr, moved)
        return frame[0] if unbatched else frame


def sidecar_path(path):
    return Path(path).with_suffix('.json')


def save_checkpoint(model, path, seed, epoch):
    """
    Atomically write weights plus a JSON sidecar

    Returns:
        str: Checkpoint id (sha256 prefix of the weights)
    """
    buffer = io.BytesIO()
    torch.save(model.state_dict(), buffer)
    data = buffer.getvalue()
    checkpoint_id = hashlib.sha256(data).hexdigest()[:12]
    atomic_write_bytes(path, data)
    meta = {
        'format_version': FORMAT_VERSION,
        'model_config': model.config.to_dict(),
        'training_seed': seed,
        'epoch': epoch,
        'checkpoint_id': checkpoint_id,
    }
    atomic_write_bytes(sidecar_path(path), json.dumps(meta, indent=2, sort_keys=True).encode())
    logger.debug(f"Saved checkpoint {checkpoint_id} to {path}")
    return checkpoint_id


def load_checkpoint(path, device='cpu'):
    """
    Load a checkpoint written by save_checkpoint

    Returns:
        tuple: (WorldModel in eval mode, sidecar metadata dict)
    """
    path = Path(path)
    with open(sidecar_path(path)) as f:
        meta = json.load(f)
    model = WorldModel(ModelConfig.from_dict(meta['model_config']))
    state = torch.load(path, map_location=device, weights_only=True)
    model.load_state_dict(state)
    model.to(device).eval()
    return model, meta
