"""GRU encoder-decoder with attention over per-frame visual features.

Teacher-forced cross-entropy supplies the main recognition loss; inference
is greedy (argmax per step, stop at EOS).
"""

import torch
import torch.nn as nn
import torch.nn.functional as F

PAD, BOS, EOS = 0, 1, 2
NUM_SPECIALS = 3


class TokenVocab:
    """Word list plus PAD/BOS/EOS bookkeeping for the decoder."""

    def __init__(self, words):
        self.words = list(words)
        self.word_to_id = {w: i + NUM_SPECIALS for i, w in enumerate(self.words)}
        self.size = len(self.words) + NUM_SPECIALS

    def encode(self, words):
        try:
            return [self.word_to_id[w] for w in words]
        except KeyError as exc:
            raise ValueError(f"word {exc.args[0]!r} not in vocabulary") from None

    def decode(self, ids):
        out = []
        for i in ids:
            if i == EOS:
                break
            if i >= NUM_SPECIALS:
                out.append(self.words[i - NUM_SPECIALS])
        return out


def attention(h_d, h_e, query_proj):
    """Dot-product attention of a (projected) decoder state over encoder
    states. Weights form a distribution; the context is their convex
    combination of encoder states.

    h_d: (B, d); h_e: (B, T, d). Returns (weights (B, T), context (B, d)).
    """
    query = query_proj(h_d)                         # (B, d)
    scores = torch.bmm(h_e, query.unsqueeze(-1)).squeeze(-1)   # (B, T)
    weights = F.softmax(scores, dim=-1)
    context = torch.bmm(weights.unsqueeze(1), h_e).squeeze(1)  # (B, d)
    return weights, context


class Seq2SeqDecoder(nn.Module):
    """Encoder GRU -> attention -> decoder GRU cell -> token MLP."""

    def __init__(self, input_dim, hidden, vocab: TokenVocab, embed_dim=32,
                 mlp_hidden=None):
        super().__init__()
        self.vocab = vocab
        self.hidden = hidden
        self.encoder = nn.GRU(input_dim, hidden, batch_first=True)
        self.embedding = nn.Embedding(vocab.size, embed_dim)
        self.cell = nn.GRUCell(embed_dim, hidden)
        self.query_proj = nn.Linear(hidden, hidden)
        mlp_hidden = mlp_hidden or hidden
        self.out_mlp = nn.Sequential(
            nn.Linear(2 * hidden, mlp_hidden),
            nn.ReLU(),
            nn.Linear(mlp_hidden, vocab.size),
        )

    def encode_sequence(self, v):
        """(B, T, d) visual features -> (encoder states (B, T, h), final
        state (B, h)); the final state seeds the decoder."""
        if v.shape[1] < 1:
            raise ValueError("cannot encode an empty feature sequence")
        states, last = self.encoder(v)
        return states, last.squeeze(0)

    def _step_logits(self, prev_tokens, h_d, h_e):
        emb = self.embedding(prev_tokens)
        h_new = self.cell(emb, h_d)
        _, context = attention(h_new, h_e, self.query_proj)
        logits = self.out_mlp(torch.cat([h_new, context], dim=-1))
        return logits, h_new

    def decode_step(self, prev_tokens, h_d, h_e):
        """One decoding step. Returns (token distribution, new decoder state)."""
        if int(torch.as_tensor(prev_tokens).max()) >= self.vocab.size:
            raise ValueError("previous token id out of vocabulary")
        logits, h_new = self._step_logits(prev_tokens, h_d, h_e)
        return F.softmax(logits, dim=-1), h_new

    def predicted_text_loss(self, v, targets, lengths=None, max_len=None):
        """Teacher-forced cross-entropy, averaged over each sequence then
        over the batch.

        targets: (B, L) token ids ending with EOS (PAD beyond ``lengths``).
        """
        if targets.dim() == 1:
            targets = targets.unsqueeze(0)
        b, L = targets.shape
        if lengths is None:
            lengths = torch.full((b,), L, dtype=torch.long,
                                 device=targets.device)
        if max_len is not None and int(lengths.max()) > max_len:
            raise ValueError(
                f"target length {int(lengths.max())} exceeds max_len {max_len}"
            )
        h_e, h_d = self.encode_sequence(v)
        inputs = torch.cat(
            [torch.full((b, 1), BOS, dtype=targets.dtype,
                        device=targets.device), targets[:, :-1]], dim=1)
        total = v.new_zeros(b)
        for t in range(L):
            logits, h_d = self._step_logits(inputs[:, t], h_d, h_e)
            step_nll = F.cross_entropy(logits, targets[:, t], reduction="none")
            total = total + step_nll * (t < lengths).to(step_nll.dtype)
        return (total / lengths.to(total.dtype)).mean()

    @torch.no_grad()
    def greedy_decode(self, v, max_len):
        """Greedy inference; never emits PAD/BOS, truncates at first EOS.

        Returns a list of token-id lists (EOS excluded).
        """
        b = v.shape[0]
        h_e, h_d = self.encode_sequence(v)
        prev = torch.full((b,), BOS, dtype=torch.long, device=v.device)
        done = torch.zeros(b, dtype=torch.bool, device=v.device)
        outputs = [[] for _ in range(b)]
        for _ in range(max_len):
            logits, h_d = self._step_logits(prev, h_d, h_e)
            logits[:, PAD] = float("-inf")
            logits[:, BOS] = float("-inf")
            prev = logits.argmax(dim=-1)
            for i in range(b):
                if not done[i]:
                    if int(prev[i]) == EOS:
                        done[i] = True
                    else:
                        outputs[i].append(int(prev[i]))
            if bool(done.all()):
                break
        return outputs
