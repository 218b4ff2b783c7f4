"""View-dependent prompts.

Each of the six canonical viewing directions gets a prompt of the stable
template ``"a {identifier} {class_noun}, {direction}"``, where the
identifier is a rare token tied to the subject and the class noun is a
coarse category word. Positional cues therefore enter the text condition
during identity fine-tuning.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigError

DIRECTIONS = ("front", "front-right", "right", "back", "left", "front-left")

# Azimuth (degrees, counter-clockwise about +Y, camera orbiting the subject)
# assigned to each canonical direction.
DIRECTION_AZIMUTH_DEG = {
    "front": 0.0,
    "front-right": 45.0,
    "right": 90.0,
    "back": 180.0,
    "left": 270.0,
    "front-left": 315.0,
}

PROMPT_TEMPLATE = "a {identifier} {class_noun}, {direction}"


@dataclass(frozen=True)
class ViewPrompt:
    identifier: str
    class_noun: str
    direction: str
    rendered_text: str

    def __post_init__(self):
        if self.direction not in DIRECTIONS:
            raise ConfigError(f"unknown direction {self.direction!r}")
        expected = PROMPT_TEMPLATE.format(
            identifier=self.identifier, class_noun=self.class_noun, direction=self.direction
        )
        if self.rendered_text != expected:
            raise ConfigError(f"rendered_text {self.rendered_text!r} does not match template")


def make_view_prompt(identifier: str, class_noun: str, direction: str) -> ViewPrompt:
    return ViewPrompt(
        identifier=identifier,
        class_noun=class_noun,
        direction=direction,
        rendered_text=PROMPT_TEMPLATE.format(
            identifier=identifier, class_noun=class_noun, direction=direction
        ),
    )


def build_view_prompts(identifier: str, class_noun: str) -> tuple[ViewPrompt, ...]:
    """One prompt per canonical direction, in canonical order.

    Raises:
        ConfigError: for empty identifier or class noun.
    """
    if not identifier or not identifier.strip():
        raise ConfigError("identifier must be nonempty")
    if not class_noun or not class_noun.strip():
        raise ConfigError("class_noun must be nonempty")
    return tuple(make_view_prompt(identifier, class_noun, d) for d in DIRECTIONS)


def parse_view_prompt(text: str) -> ViewPrompt:
    """Invert the prompt template; raises ConfigError on malformed text."""
    if not text.startswith("a "):
        raise ConfigError(f"prompt {text!r} does not start with 'a '")
    body, sep, direction = text.rpartition(", ")
    if not sep or direction not in DIRECTIONS:
        raise ConfigError(f"prompt {text!r} has no valid direction suffix")
    rest = body[2:]
    identifier, sep, class_noun = rest.partition(" ")
    if not sep or not identifier or not class_noun:
        raise ConfigError(f"prompt {text!r} lacks identifier/class noun")
    return make_view_prompt(identifier, class_noun, direction)
