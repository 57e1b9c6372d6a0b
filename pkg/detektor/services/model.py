"""Rekurrentes Faltungsnetz: Backbone pro Frame, GRU über die Zeit, STN- und Multi-Rekurrenz-Varianten.

Eingaben sind kanal-letzte Batches B x T x H x W x 3; intern wird die Zeit in den Batch gefaltet.
"""
from __future__ import annotations

import logging
import sys
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

try:
    import torch
    import torch.nn.functional as F
    from torch import nn
except ModuleNotFoundError as exc:  # pragma: no cover - import check
    raise ModuleNotFoundError(
        "Das Modul 'torch' fehlt. Bitte 'pip install -r requirements.txt' im Projekt-Venv ausführen."
    ) from exc
except ImportError as exc:  # pragma: no cover - import check
    hint = "PyTorch konnte nicht geladen werden (native Bibliotheken fehlen oder sind inkompatibel)."
    if sys.platform.startswith("win"):
        hint += " Unter Windows hilft meist das „Microsoft Visual C++ Redistributable (2015–2022)“ (x64)."
    raise ImportError(hint) from exc

from ..config import ModelSpec, RecurrentHeadSpec, STNSpec
from ..errors import ConfigurationError, InvalidInputError

logger = logging.getLogger(__name__)

NUM_TAPS = 4
IDENTITY_AFFINE = (1.0, 0.0, 0.0, 0.0, 1.0, 0.0)


def _fold_time(batch: torch.Tensor) -> Tuple[torch.Tensor, int, int]:
    if batch.dim() != 5 or batch.shape[-1] != 3:
        raise InvalidInputError(f"Erwartet B x T x H x W x 3, erhalten {tuple(batch.shape)}.")
    b, t = batch.shape[:2]
    frames = batch.reshape(b * t, *batch.shape[2:]).permute(0, 3, 1, 2).contiguous()
    return frames, b, t


def _global_pool(feature_map: torch.Tensor) -> torch.Tensor:
    return feature_map.mean(dim=(2, 3))


class TinyConvBackbone(nn.Module):
    """Stufen aus [Conv 3x3, ReLU, MaxPool 2x2]; Pooling mit ceil_mode, damit auch 8x8 funktioniert."""

    def __init__(self, widths: Sequence[int] = (8, 16, 32, 64), in_channels: int = 3) -> None:
        super().__init__()
        stages = []
        channels = in_channels
        for width in widths:
            stages.append(
                nn.Sequential(
                    nn.Conv2d(channels, width, kernel_size=3, padding=1),
                    nn.ReLU(inplace=False),
                    nn.MaxPool2d(kernel_size=2, ceil_mode=True),
                )
            )
            channels = width
        self.stages = nn.ModuleList(stages)
        self.tap_channels: Tuple[int, ...] = tuple(int(w) for w in widths)
        self.out_features = int(widths[-1])

    def forward_taps(self, x: torch.Tensor) -> List[torch.Tensor]:
        taps = []
        for stage in self.stages:
            x = stage(x)
            taps.append(x)
        return taps


class ResNetBackbone(nn.Module):
    def __init__(self, net: nn.Module) -> None:
        super().__init__()
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
        self.blocks = nn.ModuleList([net.layer1, net.layer2, net.layer3, net.layer4])
        self.tap_channels = (256, 512, 1024, 2048)
        self.out_features = 2048

    def forward_taps(self, x: torch.Tensor) -> List[torch.Tensor]:
        x = self.stem(x)
        taps = []
        for block in self.blocks:
            x = block(x)
            taps.append(x)
        return taps


class DenseNetBackbone(nn.Module):
    def __init__(self, net: nn.Module) -> None:
        super().__init__()
        f = net.features
        self.stem = nn.Sequential(f.conv0, f.norm0, f.relu0, f.pool0)
        self.blocks = nn.ModuleList([f.denseblock1, f.denseblock2, f.denseblock3, f.denseblock4])
        self.transitions = nn.ModuleList([f.transition1, f.transition2, f.transition3])
        self.final_norm = f.norm5
        self.tap_channels = (256, 512, 1024, 1024)
        self.out_features = 1024

    def forward_taps(self, x: torch.Tensor) -> List[torch.Tensor]:
        x = self.stem(x)
        taps = []
        for index, block in enumerate(self.blocks):
            x = block(x)
            if index < len(self.transitions):
                taps.append(x)
                x = self.transitions[index](x)
        taps.append(F.relu(self.final_norm(x)))
        return taps


def _load_external_weights(net: nn.Module, path: str) -> None:
    try:
        state = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError as exc:
        raise ConfigurationError(f"Backbone-Gewichte nicht gefunden: {path}") from exc
    except Exception as exc:
        raise ConfigurationError(f"Backbone-Gewichte nicht lesbar ({path}): {exc}") from exc
    if isinstance(state, Mapping) and "state_dict" in state:
        state = state["state_dict"]
    missing, unexpected = net.load_state_dict(state, strict=False)
    if missing:
        logger.warning("Backbone-Gewichte: %s Parameter fehlen (z.B. %s).", len(missing), missing[:3])
    if unexpected:
        logger.warning("Backbone-Gewichte: %s unbekannte Einträge ignoriert.", len(unexpected))
    logger.info("Backbone-Gewichte aus %s geladen.", path)


def build_backbone(spec: ModelSpec) -> nn.Module:
    if spec.backbone == "tinyconv":
        if spec.pretrained_weights:
            logger.warning("pretrained_weights wird für tinyconv ignoriert.")
        return TinyConvBackbone(spec.tinyconv_widths)

    from torchvision import models as tv_models

    net = tv_models.resnet50(weights=None) if spec.backbone == "resnet50" else tv_models.densenet121(weights=None)
    if spec.pretrained_weights:
        _load_external_weights(net, spec.pretrained_weights)
    return ResNetBackbone(net) if spec.backbone == "resnet50" else DenseNetBackbone(net)


class FrameEncoder(nn.Module):
    """Backbone plus globales Pooling und optionale Projektion auf feature_dim."""

    def __init__(self, spec: ModelSpec) -> None:
        super().__init__()
        self.backbone = build_backbone(spec)
        native = self.backbone.out_features
        self.projection: Optional[nn.Linear] = None
        if spec.feature_dim is not None and spec.feature_dim != native:
            self.projection = nn.Linear(native, spec.feature_dim)
        self.feature_dim = spec.feature_dim or native

    @property
    def tap_channels(self) -> Tuple[int, ...]:
        return tuple(self.backbone.tap_channels)

    def forward_taps(self, frames: torch.Tensor) -> List[torch.Tensor]:
        return self.backbone.forward_taps(frames)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        vector = _global_pool(self.forward_taps(frames)[-1])
        if self.projection is not None:
            vector = self.projection(vector)
        return vector


class SpatialTransformer(nn.Module):
    """Lokalisierungsnetz, Gittergenerator und bilinearer Sampler mit Null-Rand."""

    def __init__(self, spec: STNSpec, in_channels: int = 3) -> None:
        super().__init__()
        c1, c2 = spec.conv_channels
        k1, k2 = spec.kernel_sizes
        self.localization = nn.Sequential(
            nn.Conv2d(in_channels, c1, kernel_size=k1, padding=k1 // 2),
            nn.MaxPool2d(2, ceil_mode=True),
            nn.ReLU(inplace=False),
            nn.Conv2d(c1, c2, kernel_size=k2, padding=k2 // 2),
            nn.MaxPool2d(2, ceil_mode=True),
            nn.ReLU(inplace=False),
            nn.AdaptiveAvgPool2d(spec.pooled_size),
        )
        self.regressor = nn.Sequential(
            nn.Linear(c2 * spec.pooled_size * spec.pooled_size, spec.hidden_size),
            nn.ReLU(inplace=False),
            nn.Linear(spec.hidden_size, spec.regressor_outputs),
        )
        self.reset_to_identity()

    def reset_to_identity(self) -> None:
        last = self.regressor[-1]
        with torch.no_grad():
            last.weight.zero_()
            last.bias.copy_(torch.tensor(IDENTITY_AFFINE, dtype=last.bias.dtype))

    def predict_theta(self, x: torch.Tensor) -> torch.Tensor:
        features = self.localization(x).flatten(1)
        return self.regressor(features).view(-1, 2, 3)

    def forward(self, x: torch.Tensor, theta: Optional[torch.Tensor] = None) -> torch.Tensor:
        if theta is None:
            theta = self.predict_theta(x)
        else:
            theta = theta.reshape(-1, 2, 3)
            if theta.shape[0] == 1:
                theta = theta.expand(x.shape[0], 2, 3)
        theta = theta.to(dtype=x.dtype)
        grid = F.affine_grid(theta, list(x.shape), align_corners=False)
        return F.grid_sample(x, grid, mode="bilinear", padding_mode="zeros", align_corners=False)


class RecurrentSummary(nn.Module):
    """GRU mit Endausgabe: vorwärts bei t=T, bei bidirektional zusätzlich rückwärts bei t=1."""

    def __init__(self, input_size: int, spec: RecurrentHeadSpec) -> None:
        super().__init__()
        self.input_size = int(input_size)
        self.hidden_size = spec.hidden_size
        self.bidirectional = spec.bidirectional
        self.gru = nn.GRU(
            input_size=self.input_size,
            hidden_size=spec.hidden_size,
            num_layers=spec.num_layers,
            batch_first=True,
            bidirectional=spec.bidirectional,
        )
        self.output_width = spec.output_width

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        if features.dim() != 3 or features.shape[-1] != self.input_size:
            raise InvalidInputError(
                f"Erwartet B x T x {self.input_size} Merkmale, erhalten {tuple(features.shape)}."
            )
        if features.shape[1] < 1:
            raise InvalidInputError("Sequenz ohne Zeitschritte.")
        outputs, _ = self.gru(features)
        h = self.hidden_size
        if not self.bidirectional:
            return outputs[:, -1, :]
        return torch.cat([outputs[:, -1, :h], outputs[:, 0, h:]], dim=1)


class RecurrentHead(nn.Module):
    def __init__(self, input_size: int, spec: RecurrentHeadSpec) -> None:
        super().__init__()
        self.summary = RecurrentSummary(input_size, spec)
        self.classifier = nn.Linear(self.summary.output_width, 1)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return self.classifier(self.summary(features)).squeeze(1)


class MultiRecurrentHead(nn.Module):
    """Eine GRU pro Backbone-Stufe; die vier Endausgaben werden verkettet und linear fusioniert."""

    def __init__(self, tap_channels: Sequence[int], spec: RecurrentHeadSpec) -> None:
        super().__init__()
        if len(tap_channels) != NUM_TAPS:
            raise ConfigurationError(
                f"multi_recurrence braucht {NUM_TAPS} Backbone-Stufen, vorhanden sind {len(tap_channels)}."
            )
        self.summaries = nn.ModuleList([RecurrentSummary(c, spec) for c in tap_channels])
        self.fusion = nn.Linear(NUM_TAPS * spec.output_width, 1)

    def forward(self, block_features: Sequence[torch.Tensor]) -> torch.Tensor:
        if len(block_features) != NUM_TAPS:
            raise InvalidInputError(f"Erwartet {NUM_TAPS} Merkmalssequenzen, erhalten {len(block_features)}.")
        summaries = [head(seq) for head, seq in zip(self.summaries, block_features)]
        return self.fusion(torch.cat(summaries, dim=1)).squeeze(1)


class DetectorModel(nn.Module):
    def __init__(self, spec: ModelSpec) -> None:
        super().__init__()
        self.spec = spec
        self.stn: Optional[SpatialTransformer] = SpatialTransformer(spec.stn) if spec.variant == "stn" else None
        self.encoder = FrameEncoder(spec)
        # Einzelbild-Klassifikator aus dem Vortraining; bleibt für die Einzelbild-Auswertung erhalten
        self.frame_head = nn.Linear(self.encoder.feature_dim, 1)
        if spec.variant == "multi_recurrence":
            self.head: nn.Module = MultiRecurrentHead(self.encoder.tap_channels, spec.recurrent)
        else:
            self.head = RecurrentHead(self.encoder.feature_dim, spec.recurrent)

    def _check_sequence(self, batch: torch.Tensor) -> None:
        t = batch.shape[1] if batch.dim() == 5 else None
        if t != self.spec.sequence_length:
            raise InvalidInputError(
                f"Erwartet {self.spec.sequence_length} Frames pro Fenster, erhalten {tuple(batch.shape)}."
            )

    def _prepare_frames(self, batch: torch.Tensor) -> Tuple[torch.Tensor, int, int]:
        frames, b, t = _fold_time(batch)
        size = self.spec.image_size
        if frames.shape[-2:] != (size, size):
            raise InvalidInputError(
                f"Erwartet Ausschnitte {size} x {size}, erhalten {tuple(frames.shape[-2:])}."
            )
        if self.stn is not None:
            frames = self.stn(frames)
        return frames, b, t

    def encode_frames(self, batch: torch.Tensor) -> torch.Tensor:
        frames, b, t = self._prepare_frames(batch)
        return self.encoder(frames).view(b, t, -1)

    def block_features(self, batch: torch.Tensor) -> List[torch.Tensor]:
        frames, b, t = self._prepare_frames(batch)
        return [_global_pool(tap).view(b, t, -1) for tap in self.encoder.forward_taps(frames)]

    def frame_logits(self, batch: torch.Tensor) -> torch.Tensor:
        """B x T Logits des Einzelbild-Klassifikators."""
        return self.frame_head(self.encode_frames(batch)).squeeze(-1)

    def forward(self, batch: torch.Tensor) -> torch.Tensor:
        # Einzelbild-Pfad (frame_logits) akzeptiert beliebig viele Frames
        self._check_sequence(batch)
        if isinstance(self.head, MultiRecurrentHead):
            return self.head(self.block_features(batch))
        return self.head(self.encode_frames(batch))

    def backbone_parameters(self) -> List[nn.Parameter]:
        return list(self.encoder.backbone.parameters())


def build_model(spec: ModelSpec, seed: int = 0) -> DetectorModel:
    """Gleicher Seed ergibt bitgleiche Initialisierung."""
    generator_state = torch.random.get_rng_state()
    torch.manual_seed(int(seed))
    try:
        model = DetectorModel(spec)
    finally:
        torch.random.set_rng_state(generator_state)
    logger.debug("Modell %s erstellt (%s Parameter).", spec.describe(), parameter_count(model))
    return model


def encode_frames(model: DetectorModel, batch: torch.Tensor) -> torch.Tensor:
    return model.encode_frames(batch)


def recurrent_classify(head: RecurrentHead, features: torch.Tensor) -> torch.Tensor:
    return head(features)


def forward(model: DetectorModel, batch: torch.Tensor) -> torch.Tensor:
    return model(batch)


def stn_align(stn: SpatialTransformer, images: torch.Tensor, theta: Optional[torch.Tensor] = None) -> torch.Tensor:
    """B x H x W x 3 rein, B x H x W x 3 raus."""
    if images.dim() != 4 or images.shape[-1] != 3:
        raise InvalidInputError(f"Erwartet B x H x W x 3, erhalten {tuple(images.shape)}.")
    warped = stn(images.permute(0, 3, 1, 2).contiguous(), theta)
    return warped.permute(0, 2, 3, 1)


def multi_recurrent_classify(head: MultiRecurrentHead, block_features: Sequence[torch.Tensor]) -> torch.Tensor:
    return head(block_features)


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def gru_parameter_count(input_size: int, spec: RecurrentHeadSpec) -> int:
    """Geschlossene Form: 3 Gates mit Eingabe-, Rekurrenzgewichten und zwei Bias-Vektoren."""
    h = spec.hidden_size
    directions = 2 if spec.bidirectional else 1
    total = 0
    for layer in range(spec.num_layers):
        layer_input = input_size if layer == 0 else h * directions
        total += directions * 3 * (h * layer_input + h * h + 2 * h)
    return total


def model_arrays(model: nn.Module) -> Dict[str, np.ndarray]:
    return {name: tensor.detach().cpu().numpy().astype(np.float32) for name, tensor in model.state_dict().items()}


def load_model_arrays(model: nn.Module, arrays: Mapping[str, np.ndarray], *, strict: bool = True) -> List[str]:
    """Lädt Arrays in das State-Dict; Form- oder Namensabweichungen sind Konfigurationsfehler."""
    state = model.state_dict()
    mismatched = [
        name for name, value in arrays.items()
        if name in state and tuple(state[name].shape) != tuple(np.shape(value))
    ]
    missing = [name for name in state if name not in arrays]
    unexpected = [name for name in arrays if name not in state]
    if mismatched or (strict and (missing or unexpected)):
        problems = mismatched + missing + unexpected
        raise ConfigurationError(
            "Checkpoint passt nicht zum Modell: " + ", ".join(sorted(problems)[:6])
        )
    updated = {
        name: torch.from_numpy(np.asarray(value)).to(dtype=state[name].dtype)
        for name, value in arrays.items()
        if name in state
    }
    model.load_state_dict(updated, strict=False)
    return missing
