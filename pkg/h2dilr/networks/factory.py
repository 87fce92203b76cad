"""Deterministic construction of every network a run needs."""

from collections.abc import Mapping
from dataclasses import dataclass

from h2dilr.core.seeding import derive_rng
from h2dilr.models.config import DecoderHeadConfig, EncoderConfig
from h2dilr.networks.convnet import SubjectNetworks
from h2dilr.networks.transformer import TransformerClassifier


@dataclass
class ParameterSet:
    networks: SubjectNetworks
    classifier: TransformerClassifier | None

    def counts(self) -> dict[str, int]:
        """Parameter counts per network."""
        counts = {}
        for subject in self.networks.configs:
            counts[f"encoder.{subject}"] = self.networks.encoders[subject].parameter_count()
            counts[f"decoder.{subject}"] = self.networks.decoders[subject].parameter_count()
        if self.classifier is not None:
            counts["classifier"] = self.classifier.parameter_count()
        return counts


def build_classifier(
    config: DecoderHeadConfig, seed: int, *keys: int | str, name: str = "classifier"
) -> TransformerClassifier:
    return TransformerClassifier(config, derive_rng(seed, "init", "classifier", *keys), name)


def init_parameters(
    encoders: Mapping[int, EncoderConfig],
    head: DecoderHeadConfig | None,
    seed: int,
) -> ParameterSet:
    """Fan-in normal weights, zero biases, unit layer-norm gains; one init stream per network."""
    networks = SubjectNetworks(encoders, seed)
    classifier = build_classifier(head, seed) if head is not None else None
    return ParameterSet(networks, classifier)


def convnet_parameter_count(config: EncoderConfig) -> int:
    """Analytic parameter count of one ConvEncoder."""
    widths = [config.in_channels, config.stem_channels, *config.stage_channels, config.latent_dim]
    return sum(c_in * c_out * config.kernel + c_out for c_in, c_out in zip(widths, widths[1:]))
