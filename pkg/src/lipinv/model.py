"""Full model assembly: visual encoder, both disentanglement heads, decoder.

All submodules are constructed unconditionally so parameter initialization
consumes the same RNG stream no matter which branches a run later enables;
a run with a branch weighted to zero is then bit-identical to one with the
branch toggled off.
"""

import torch.nn as nn

from .adversary import AdversarialSpeakerHead
from .config import ModelConfig
from .crossmodal import ContrastiveTextHead
from .encoder import VisualEncoder
from .seq2seq import Seq2SeqDecoder, TokenVocab


class LipreadingModel(nn.Module):
    def __init__(self, cfg: ModelConfig, frame_shape, lexicon, n_speakers):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.lexicon = list(lexicon)
        self.n_speakers = n_speakers
        self.visual = VisualEncoder(cfg, frame_shape)
        self.text_head = ContrastiveTextHead(len(lexicon), cfg)
        self.adversary = AdversarialSpeakerHead(
            self.visual.tap_dim, cfg.adversary_hidden, n_speakers,
            mode=self.visual.tap_layout, flat_group_size=cfg.flat_group_size)
        self.vocab = TokenVocab(lexicon)
        self.decoder = Seq2SeqDecoder(cfg.model_dim, cfg.decoder_hidden,
                                      self.vocab, embed_dim=cfg.decoder_embed)

    def encode(self, frames):
        return self.visual(frames)

    forward = encode

    def utterance_embedding(self, frames):
        """Pooled per-utterance embedding (what the speaker probe sees)."""
        _, tap = self.visual(frames)
        return self.adversary.pool(tap)

    def config_echo(self):
        import dataclasses
        return {
            "model": dataclasses.asdict(self.cfg),
            "lexicon_size": len(self.lexicon),
            "n_speakers": self.n_speakers,
            "frame_shape": list(self.visual.frame_shape),
            "decoder_categories": self.vocab.size,  # lexicon + PAD/BOS/EOS
        }
