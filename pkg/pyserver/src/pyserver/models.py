"""Checkpoint loading and the three model operations.

A ServedModel wraps one transformer checkpoint in one role.  Policy
models answer next-token distributions and seeded rollouts; reward models
score prompt+response pairs with their scalar head, clamped into the
declared bounds.  Every forward pass runs under a lock, in eval mode,
without gradients, so the protocol's purity and determinism contracts
hold regardless of request interleaving.

Operation is id-only: requests and responses traffic in token ids, and
the tokenizer's job is to pin the vocabulary — its size must match the
model's, or loading fails before the server ever binds.

Next-token distributions are computed in float64 regardless of model
precision, so a top-k report plus its tail always sums to 1 well within
the wire tolerance.  The tail log probability is log1p(-sum of top-k
probabilities), clamped to -inf once the top-k mass reaches 1 - 1e-12.

Every forward is anchored on the model's BOS token (EOS when no BOS is
declared), which makes the empty context a valid query.
"""

from __future__ import annotations

import hashlib
import logging
import math
import threading
from pathlib import Path

import torch

from .config import ModelSpec
from .errors import CheckpointError, ContextLengthError, TokenRangeError

log = logging.getLogger(__name__)

_DTYPES = {"float32": torch.float32, "float64": torch.float64,
           "float16": torch.float16}
TAIL_CLAMP = 1e-12


def _derive_seed(seed: int, index: int) -> int:
    """Stable per-continuation generator seed (hash-based, process-free)."""
    digest = hashlib.sha256(f"rollout|{seed}|{index}".encode()).digest()
    return int.from_bytes(digest[:8], "big") & ((1 << 63) - 1)


class ServedModel:
    """One loaded checkpoint, ready to answer protocol operations."""

    def __init__(self, spec: ModelSpec, model, tokenizer):
        self.spec = spec
        self.model = model
        self.tokenizer = tokenizer
        self._lock = threading.Lock()

        declared = len(tokenizer)
        if declared != model.config.vocab_size:
            raise CheckpointError(
                f"{spec.checkpoint}: tokenizer declares {declared} tokens "
                f"but the model was built for {model.config.vocab_size}")
        self.vocab_size = declared
        eos = tokenizer.eos_token_id
        if eos is None:
            eos = model.config.eos_token_id
        if eos is None or not 0 <= eos < self.vocab_size:
            raise CheckpointError(
                f"{spec.checkpoint}: no usable EOS token (got {eos!r})")
        self.eos_id = int(eos)
        bos = model.config.bos_token_id
        self.bos_id = int(bos) if bos is not None else self.eos_id
        self.max_positions = getattr(model.config,
                                     "max_position_embeddings", None)
        self.name = Path(spec.checkpoint).name

    # -- loading -------------------------------------------------------------

    @classmethod
    def load(cls, spec: ModelSpec) -> "ServedModel":
        from transformers import (AutoModelForCausalLM,
                                  AutoModelForSequenceClassification,
                                  AutoTokenizer)
        loader = (AutoModelForCausalLM if spec.role == "policy"
                  else AutoModelForSequenceClassification)
        try:
            tokenizer = AutoTokenizer.from_pretrained(spec.checkpoint)
            model = loader.from_pretrained(spec.checkpoint)
        except Exception as exc:  # startup failure, reported before binding
            raise CheckpointError(
                f"cannot load {spec.role} checkpoint "
                f"{spec.checkpoint!r}: {exc}") from exc
        if spec.role == "reward" and model.config.num_labels != 1:
            raise CheckpointError(
                f"{spec.checkpoint}: reward checkpoints need a single-label "
                f"scalar head, found num_labels={model.config.num_labels}")
        model = model.to(device=torch.device(spec.device),
                         dtype=_DTYPES[spec.dtype])
        model.eval()
        log.info("loaded %s checkpoint %s (vocab=%d) on %s/%s",
                 spec.role, spec.checkpoint, model.config.vocab_size,
                 spec.device, spec.dtype)
        return cls(spec, model, tokenizer)

    # -- shared forward plumbing ----------------------------------------------

    def _validate_tokens(self, tokens, what: str) -> list[int]:
        out = []
        for t in tokens:
            t = int(t)
            if not 0 <= t < self.vocab_size:
                raise TokenRangeError(
                    f"{what} carries token {t}, outside vocab "
                    f"[0, {self.vocab_size})")
            out.append(t)
        return out

    def _check_length(self, n_ids: int) -> None:
        if self.max_positions is not None and n_ids > self.max_positions:
            raise ContextLengthError(
                f"context of {n_ids} ids exceeds the model's "
                f"{self.max_positions}-position limit")

    def _forward_raw(self, ids: list[int]) -> torch.Tensor:
        """One forward pass; the first batch row of logits, float64 on CPU."""
        self._check_length(len(ids))
        batch = torch.tensor([ids], dtype=torch.long,
                             device=self.model.device)
        with self._lock, torch.no_grad():
            out = self.model(input_ids=batch,
                             attention_mask=torch.ones_like(batch))
        return out.logits[0].to(device="cpu", dtype=torch.float64)

    def _forward_logits(self, ids: list[int]) -> torch.Tensor:
        """Next-token logits after `ids` (policy role)."""
        return self._forward_raw(ids)[-1, :]

    def next_logprobs(self, tokens) -> torch.Tensor:
        """Full-vocabulary next-token log probabilities (float64)."""
        ids = [self.bos_id] + self._validate_tokens(tokens, "context")
        return torch.log_softmax(self._forward_logits(ids), dim=-1)

    # -- policy operations -----------------------------------------------------

    def topk_report(self, tokens, k: int) -> tuple[list[tuple[int, float]], float]:
        """Top-k (token, logprob) entries plus the tail log probability."""
        lp = self.next_logprobs(tokens).tolist()
        order = sorted(range(self.vocab_size), key=lambda z: (-lp[z], z))
        entries = [(z, lp[z]) for z in order[:min(k, self.vocab_size)]]
        kept = math.fsum(math.exp(l) for _, l in entries)
        if kept >= 1.0 - TAIL_CLAMP:
            tail = -math.inf
        else:
            tail = math.log1p(-kept)
        return entries, tail

    def rollout(self, tokens, n: int, max_len: int, temperature: float,
                seed: int) -> list[list[int]]:
        """n seeded continuations of `tokens`, each at most max_len ids,
        stopping at EOS (kept as the final id).  Identical requests yield
        identical continuations on a fixed device/precision."""
        ctx = self._validate_tokens(tokens, "context")
        conts: list[list[int]] = []
        for i in range(n):
            if ctx and ctx[-1] == self.eos_id:
                conts.append([])  # nothing follows EOS
                continue
            gen = torch.Generator(device="cpu")
            gen.manual_seed(_derive_seed(seed, i))
            ids = [self.bos_id] + ctx
            cont: list[int] = []
            for _ in range(max_len):
                if (self.max_positions is not None
                        and len(ids) >= self.max_positions):
                    break  # position budget exhausted; contract still holds
                lp = torch.log_softmax(self._forward_logits(ids), dim=-1)
                if temperature == 0.0:
                    z = int(torch.argmax(lp).item())
                else:
                    probs = torch.softmax(lp / temperature, dim=-1)
                    z = int(torch.multinomial(probs, 1, generator=gen).item())
                cont.append(z)
                ids.append(z)
                if z == self.eos_id:
                    break
            conts.append(cont)
        return conts

    # -- reward operation --------------------------------------------------------

    def reward_score(self, prompt, response) -> float:
        """Scalar-head score of prompt+response, clamped into the declared
        bounds so the served contract holds for any checkpoint."""
        ids = ([self.bos_id]
               + self._validate_tokens(prompt, "prompt")
               + self._validate_tokens(response, "response"))
        value = float(self._forward_raw(ids)[0].item())
        lo, hi = self.spec.bounds
        return min(max(value, lo), hi)


# --- tiny offline checkpoints -------------------------------------------------

def make_tiny_checkpoint(out_dir: str, role: str = "policy", *, seed: int = 0,
                         vocab_size: int = 32, n_embd: int = 16,
                         n_layer: int = 1, n_head: int = 2,
                         n_positions: int = 64) -> str:
    """Materialize a small randomly initialized GPT-2-family checkpoint
    (weights + tokenizer) on disk, loadable through the exact code path a
    published checkpoint uses.  Deterministic per seed."""
    from tokenizers import Tokenizer
    from tokenizers.models import WordLevel
    from transformers import (GPT2Config, GPT2ForSequenceClassification,
                              GPT2LMHeadModel, PreTrainedTokenizerFast)

    if role not in ("policy", "reward"):
        raise ValueError(f"role must be 'policy' or 'reward', got {role!r}")
    if vocab_size < 2:
        raise ValueError(f"vocab_size must be >= 2, got {vocab_size}")
    words = {f"t{i}": i for i in range(vocab_size - 1)}
    words["<eos>"] = vocab_size - 1
    tokenizer = PreTrainedTokenizerFast(
        tokenizer_object=Tokenizer(WordLevel(words, unk_token="t0")),
        eos_token="<eos>", unk_token="t0")

    torch.manual_seed(seed)
    cfg = GPT2Config(vocab_size=vocab_size, n_positions=n_positions,
                     n_embd=n_embd, n_layer=n_layer, n_head=n_head,
                     bos_token_id=vocab_size - 1, eos_token_id=vocab_size - 1,
                     pad_token_id=vocab_size - 1,
                     **({"num_labels": 1} if role == "reward" else {}))
    model = (GPT2LMHeadModel(cfg) if role == "policy"
             else GPT2ForSequenceClassification(cfg))
    model.save_pretrained(out_dir)
    tokenizer.save_pretrained(out_dir)
    return str(out_dir)
