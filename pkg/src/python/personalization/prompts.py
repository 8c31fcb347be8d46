"""
Prompt template grammar.

Every prompt is a fixed-length token id sequence:

    [STYLE, SUBJ_1, SUBJ_2, SUBJ_3, SUBJ_4, CONTEXT]

Subject slots hold descriptor tokens (or PAD); compression replaces the
descriptors by the generic FACE token.
"""

from typing import Dict, List, Sequence

import torch

from core.exceptions import PromptValidationError

PAD = '<pad>'
FACE = 'face'

STYLES = ('photo', 'sketch', 'poster', 'oil', 'comic', 'grainy')
CONTEXTS = ('forest', 'city', 'beach', 'plain')
DESCRIPTORS = (
    'young', 'old',
    'round', 'narrow',
    'curly', 'straight', 'bald', 'long',
    'dark', 'blond', 'red', 'gray',
    'glasses', 'hat', 'freckles',
)

VOCAB: List[str] = [PAD, FACE, *STYLES, *CONTEXTS, *DESCRIPTORS]
TOKEN_IDS: Dict[str, int] = {word: i for i, word in enumerate(VOCAB)}

SUBJECT_SLOTS = 4
PROMPT_LENGTH = 2 + SUBJECT_SLOTS

STYLE_PHRASES = {
    'photo': 'a photo of',
    'sketch': 'a pencil sketch of',
    'poster': 'a wanted poster of',
    'oil': 'an oil painting of',
    'comic': 'a comic drawing of',
    'grainy': 'a grainy photo of',
}


def token_id(word: str) -> int:
    if word not in TOKEN_IDS:
        raise PromptValidationError(f"'{word}' is not in the prompt vocabulary")
    return TOKEN_IDS[word]


def build_prompt(style: str, subject: Sequence[str] = (), context: str = 'plain') -> List[int]:
    """
    Build prompt token ids from template parts.

    Args:
        style: One of ``STYLES``
        subject: Up to four descriptors (or ``[FACE]``)
        context: One of ``CONTEXTS``, or PAD for no context

    Returns:
        Token ids of length ``PROMPT_LENGTH``
    """
    if style not in STYLES:
        raise PromptValidationError(f"unknown style '{style}'")
    if context != PAD and context not in CONTEXTS:
        raise PromptValidationError(f"unknown context '{context}'")
    subject = list(subject)
    if len(subject) > SUBJECT_SLOTS:
        raise PromptValidationError(f"at most {SUBJECT_SLOTS} subject descriptors, "
                                    f"got {len(subject)}")
    slots = subject + [PAD] * (SUBJECT_SLOTS - len(subject))
    return validate_prompt([token_id(style)] + [token_id(w) for w in slots] + [token_id(context)])


def validate_prompt(tokens: Sequence[int]) -> List[int]:
    """Check that ``tokens`` follows the template; return them as a list."""
    tokens = [int(t) for t in tokens]
    if len(tokens) != PROMPT_LENGTH:
        raise PromptValidationError(f"prompt must have {PROMPT_LENGTH} tokens, got {len(tokens)}")
    if min(tokens) < 0 or max(tokens) >= len(VOCAB):
        raise PromptValidationError(f"token id out of vocabulary: {tokens}")
    style, subject, context = tokens[0], tokens[1:-1], tokens[-1]
    if VOCAB[style] not in STYLES:
        raise PromptValidationError(f"first slot must be a style, got '{VOCAB[style]}'")
    if VOCAB[context] != PAD and VOCAB[context] not in CONTEXTS:
        raise PromptValidationError(f"last slot must be a context, got '{VOCAB[context]}'")
    for tok in subject:
        if VOCAB[tok] not in DESCRIPTORS and VOCAB[tok] not in (PAD, FACE):
            raise PromptValidationError(f"subject slot holds non-subject token '{VOCAB[tok]}'")
    return tokens


def compress_prompt(tokens: Sequence[int]) -> List[int]:
    """Replace subject descriptors by the generic face token; style and context are kept."""
    tokens = validate_prompt(tokens)
    subject = tokens[1:-1]
    if all(t == TOKEN_IDS[PAD] for t in subject):
        return tokens
    compressed = [TOKEN_IDS[FACE]] + [TOKEN_IDS[PAD]] * (SUBJECT_SLOTS - 1)
    return [tokens[0]] + compressed + [tokens[-1]]


def compress_batch(tokens: torch.Tensor) -> torch.Tensor:
    """Row-wise ``compress_prompt`` over a (B, L) tensor."""
    rows = [compress_prompt(row) for row in tokens.tolist()]
    return torch.tensor(rows, dtype=torch.long, device=tokens.device)


def kv_encoder_prompt() -> List[int]:
    """Fixed inference prompt of the KV encoder: 'a photo of a face'."""
    return build_prompt('photo', [FACE], PAD)


def prompt_text(tokens: Sequence[int]) -> str:
    """Human-readable rendering, e.g. 'an oil painting of a old curly face in a forest'."""
    tokens = validate_prompt(tokens)
    style = VOCAB[tokens[0]]
    words = [VOCAB[t] for t in tokens[1:-1] if VOCAB[t] not in (PAD, FACE)]
    text = f"{STYLE_PHRASES[style]} a {' '.join(words + [FACE])}"
    context = VOCAB[tokens[-1]]
    if context != PAD:
        text += f" in a {context}"
    return text


def parse_prompt(text: str) -> List[int]:
    """
    Parse a 'style: descriptors... @ context' shorthand, e.g. 'oil: old curly @ forest'.

    Used by the CLI's --prompt flag.
    """
    if ':' not in text:
        raise PromptValidationError(f"prompt '{text}' must look like "
                                    "'style: descriptors @ context'")
    style, rest = (part.strip() for part in text.split(':', 1))
    context = PAD
    if '@' in rest:
        rest, context = (part.strip() for part in rest.split('@', 1))
    subject = [w for w in rest.replace(',', ' ').split() if w]
    return build_prompt(style, subject, context)
