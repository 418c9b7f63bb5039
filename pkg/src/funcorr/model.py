"""Full model bundle: frozen trunk + gating variant + modular feature head."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import gating as G
from . import tensor as T
from .errors import ConfigError, VocabularyError
from .modnet import ModNet, ModularNetConfig, modnet_forward, modnet_init
from .trunk import FeatureMap, Trunk, TrunkConfig, trunk_forward, trunk_init


@dataclass
class ModelConfig:
    tasks: tuple
    variant: str = "task"
    trunk: TrunkConfig = field(default_factory=TrunkConfig)
    modnet: ModularNetConfig = field(default_factory=ModularNetConfig.desk)
    embed_dim: int = G.EMBED_DIM
    temperature: float = 1.0
    normalize: bool = False
    seed: int = 0

    def validate(self):
        if self.variant not in G.VARIANTS:
            raise ConfigError(f"variant must be one of {G.VARIANTS}, got {self.variant!r}")
        if not self.tasks:
            raise ConfigError("model needs a non-empty task vocabulary")
        self.modnet.validate()


class Model:
    """Owns the parameter store; trunk entries are frozen, the rest trainable
    according to the gating variant."""

    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        self.tasks = tuple(config.tasks)
        self.store = T.ParameterStore()

        # The trunk seed is independent of the model seed: like a pretrained
        # backbone, the same frozen trunk can back many differently-seeded heads.
        self.trunk = trunk_init(config.trunk)
        for i, (w, b) in enumerate(zip(self.trunk.weights, self.trunk.biases)):
            self.store.add(f"trunk/block{i}/w", w, trainable=False)
            self.store.add(f"trunk/block{i}/b", b, trainable=False)

        self.modnet: ModNet = modnet_init(config.modnet, self.trunk.out_channels, seed=config.seed)
        for i, j, blk in self.modnet.all_blocks():
            p = f"modnet/l{i}m{j}"
            self.store.add(f"{p}/conv_w", blk.conv_w)
            self.store.add(f"{p}/conv_b", blk.conv_b)
            self.store.add(f"{p}/bn_gamma", blk.bn_gamma)
            self.store.add(f"{p}/bn_beta", blk.bn_beta)

        # Embeddings and the gating MLP exist for every variant but only train
        # in the task-conditioned one; uniform/shared leave them off-tape.
        learn_gate = config.variant == "task"
        self.embeddings = G.embeddings_init(len(self.tasks), config.embed_dim, seed=config.seed)
        self.store.add("embeddings", self.embeddings, trainable=learn_gate)
        self.gating = G.gating_init(
            config.modnet.layout, embed_dim=config.embed_dim, seed=config.seed
        )
        self.store.add("gating/fc1_w", self.gating.fc1_w, trainable=learn_gate)
        self.store.add("gating/fc1_b", self.gating.fc1_b, trainable=learn_gate)
        for i, (hw, hb) in enumerate(zip(self.gating.head_w, self.gating.head_b)):
            self.store.add(f"gating/head{i}_w", hw, trainable=learn_gate)
            self.store.add(f"gating/head{i}_b", hb, trainable=learn_gate)

        self.shared_logits = None
        if config.variant == "shared":
            self.shared_logits = G.make_shared_gating(config.modnet.layout, seed=config.seed)
            for i, l in enumerate(self.shared_logits):
                self.store.add(f"shared/{i}", l)

    @property
    def variant(self) -> str:
        return self.config.variant

    @property
    def stride(self) -> int:
        return self.trunk.config.downsample

    @property
    def out_channels(self) -> int:
        return self.config.modnet.out_channels

    def task_index(self, task: str) -> int:
        try:
            return self.tasks.index(task)
        except ValueError:
            raise VocabularyError(f"unknown task {task!r}; vocabulary: {list(self.tasks)}") from None

    def gating_for_task(self, task_index: int) -> G.GatingWeights:
        layout = self.config.modnet.layout
        if self.variant == "uniform":
            return G.make_uniform_gating(layout)
        if self.variant == "shared":
            return G.shared_forward(self.shared_logits, layout)
        emb = T.take_row(self.embeddings, task_index)
        return G.gating_forward(emb, self.gating, layout)

    def forward_batch(self, r_batch: T.Tensor, task_index: int, mode: str = "eval") -> T.Tensor:
        """(B,C,H,W) cached trunk features for one task -> (B,F,H,W)."""
        return modnet_forward(r_batch, self.gating_for_task(task_index), self.modnet, mode=mode)


def model_forward(image, task: str, model: Model, mode: str = "eval") -> FeatureMap:
    """Compose trunk -> gating -> modular net for a single image and task."""
    idx = model.task_index(task)
    r = trunk_forward(image, model.trunk)
    out = model.forward_batch(T.Tensor(r.values.data[None]), idx, mode=mode)
    return FeatureMap(values=T.take_row(out, 0), stride=r.stride, image_size=r.image_size)
