"""The full model set (tokenizer, masked transformer, residual head, adapters) and its persistence."""
from __future__ import annotations

from dataclasses import dataclass, field

from . import checkpoint as ckpt
from .adapters import AdapterTower, ResidualHead
from .backbone import MaskedTransformer
from .config import Config, ConfigError
from .motion import MUSIC_DIM, SKELETON, Skeleton
from .tokenizer import TokenizerModel

SECTIONS = ("tokenizer", "t2m", "residual_head", "music_adapter", "pose_adapter")
STAGE_SECTIONS = {
    "tokenizer": ("tokenizer",),
    "t2m": ("t2m", "residual_head"),
    "music": ("music_adapter",),
    "pose": ("pose_adapter",),
}
STAGES = tuple(STAGE_SECTIONS)


class PrerequisiteError(RuntimeError):
    pass


@dataclass
class ModelSet:
    config: Config
    tokenizer: TokenizerModel
    t2m: MaskedTransformer
    residual: ResidualHead
    music: AdapterTower | None = None
    pose: AdapterTower | None = None
    stages: list = field(default_factory=list)
    skeleton: Skeleton = SKELETON

    @classmethod
    def build(cls, cfg: Config, skeleton: Skeleton = SKELETON) -> "ModelSet":
        s = cfg.seed
        tok = TokenizerModel(dim=skeleton.feature_dim, width=cfg.tok_width, latent=cfg.tok_latent,
                             codes=cfg.tok_codes, layers=cfg.tok_layers, beta=cfg.tok_beta, seed=s)
        t2m = MaskedTransformer(cfg.tok_codes, len(cfg.genres), width=cfg.width, heads=cfg.heads,
                                depth=cfg.depth, max_tokens=cfg.max_tokens, seed=s + 1)
        res = ResidualHead(cfg.tok_codes, len(cfg.genres), quant_layers=cfg.tok_layers, music_dim=MUSIC_DIM,
                           width=cfg.res_width, depth=cfg.res_depth, max_tokens=cfg.max_tokens, seed=s + 2)
        return cls(cfg, tok, t2m, res, skeleton=skeleton)

    @property
    def fps(self) -> int:
        return self.config.fps

    @property
    def pose_dim(self) -> int:
        return self.skeleton.joint_count * 4

    def new_music_tower(self) -> AdapterTower:
        return AdapterTower(self.t2m, MUSIC_DIM, seed=self.config.seed + 3)

    def new_pose_tower(self) -> AdapterTower:
        return AdapterTower(self.t2m, self.pose_dim, seed=self.config.seed + 4)

    def require(self, *stages: str) -> None:
        missing = [s for s in stages if s not in self.stages]
        if missing:
            raise PrerequisiteError(f"missing trained stage(s): {', '.join(missing)}")

    def module_for(self, section: str):
        return {"tokenizer": self.tokenizer, "t2m": self.t2m, "residual_head": self.residual,
                "music_adapter": self.music, "pose_adapter": self.pose}[section]

    # -- persistence
    def header(self) -> str:
        return "[config]\n" + self.config.to_text() + "[meta]\nstages = " + ",".join(self.stages) + "\n"

    def sections(self) -> dict:
        out = {}
        for stage in self.stages:
            for sec in STAGE_SECTIONS[stage]:
                out[sec] = self.module_for(sec).state_dict()
        return out

    def save(self, path) -> None:
        ckpt.save(path, self.header(), self.sections())

    @classmethod
    def load(cls, path) -> "ModelSet":
        header, sections = ckpt.load(path)
        return cls.from_parts(header, sections)

    @classmethod
    def from_parts(cls, header: str, sections: dict) -> "ModelSet":
        try:
            cfg_text, meta = header.split("[meta]\n", 1)
            cfg = Config.from_text(cfg_text.replace("[config]\n", "", 1))
        except (ValueError, ConfigError) as e:
            raise ckpt.CheckpointError(f"bad checkpoint header: {e}") from None
        stages = [s for s in meta.split("=", 1)[1].strip().split(",") if s]
        models = cls.build(cfg)
        for stage in stages:
            if stage not in STAGE_SECTIONS:
                raise ckpt.CheckpointError(f"unknown stage {stage!r} in checkpoint")
            if stage == "music":
                models.music = models.new_music_tower()
            if stage == "pose":
                models.pose = models.new_pose_tower()
            for sec in STAGE_SECTIONS[stage]:
                if sec not in sections:
                    raise ckpt.CheckpointError(f"checkpoint lacks section {sec!r}")
                try:
                    models.module_for(sec).load_state_dict(sections[sec])
                except (KeyError, ValueError) as e:
                    raise ckpt.CheckpointError(f"section {sec!r}: {e}") from None
        models.stages = stages
        return models

    def freeze_all(self) -> None:
        for m in (self.tokenizer, self.t2m, self.residual, self.music, self.pose):
            if m is not None:
                m.freeze()
