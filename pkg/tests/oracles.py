"""Independent brute-force oracles used to audit generator and model output.

These deliberately re-derive answers from scene geometry with their own
question parsing, so they share no code with the template generator.
"""

import re

from declvqa.world import COLOR_NAMES, SIZE_NAMES, TYPE_NAMES, Scene, WorldConfig

_Q_COLOR = re.compile(r"^what color is the (\w+)\?$")
_Q_TYPE = re.compile(r"^what is the (\w+) object\?$")
_Q_REL = re.compile(r"^what is left of the (\w+)\?$")
_Q_SIDE = re.compile(r"^on which side is the (\w+)\?$")
_Q_VERIFY = re.compile(r"^is there a (\w+) (\w+)\?$")


def answer_question(question: str, scene: Scene, cfg: WorldConfig) -> str:
    """Recompute the answer to a templated question straight from the scene."""
    if m := _Q_COLOR.match(question):
        obj = _by_type(scene, m.group(1))
        return COLOR_NAMES[obj.color_id]
    if m := _Q_TYPE.match(question):
        color_id = COLOR_NAMES.index(m.group(1))
        obj = next(o for o in scene.objects if o.color_id == color_id)
        return TYPE_NAMES[obj.type_id]
    if m := _Q_REL.match(question):
        target = _by_type(scene, m.group(1))
        left = [
            o
            for o in scene.objects
            if o.cell[1] == target.cell[1] and o.cell[0] < target.cell[0]
        ]
        assert len(left) == 1, f"ambiguous left-of reference in {question!r}"
        return TYPE_NAMES[left[0].type_id]
    if m := _Q_SIDE.match(question):
        obj = _by_type(scene, m.group(1))
        cx = (obj.cell[0] + 0.5) / cfg.grid[0]
        return "left" if cx < 0.5 else "right"
    if m := _Q_VERIFY.match(question):
        color_id = COLOR_NAMES.index(m.group(1))
        type_id = TYPE_NAMES.index(m.group(2))
        present = any(o.color_id == color_id and o.type_id == type_id for o in scene.objects)
        return "yes" if present else "no"
    raise ValueError(f"oracle cannot parse question: {question!r}")


def _by_type(scene: Scene, type_name: str):
    type_id = TYPE_NAMES.index(type_name)
    matches = [o for o in scene.objects if o.type_id == type_id]
    assert len(matches) == 1, f"referent {type_name!r} not unique"
    return matches[0]


def statement_is_true(statement: str, scene: Scene, cfg: WorldConfig) -> bool:
    """Check a declarative caption sentence against the scene."""
    patterns = [
        (re.compile(r"^the (\w+) is (\w+)\.$"), _check_color_or_side),
        (re.compile(r"^the (\w+) object is a (\w+)\.$"), _check_type),
        (re.compile(r"^the (\w+) is on the (\w+)\.$"), _check_side),
        (re.compile(r"^yes, there is a (\w+) (\w+)\.$"), _check_present),
        (re.compile(r"^no, there is no (\w+) (\w+)\.$"), _check_absent),
        (re.compile(r"^the (\w+) is left of the (\w+)\.$"), _check_left_of),
    ]
    for pattern, checker in patterns:
        if m := pattern.match(statement):
            return checker(m, scene, cfg)
    raise ValueError(f"oracle cannot parse statement: {statement!r}")


def _check_color_or_side(m, scene, cfg):
    obj = _by_type(scene, m.group(1))
    return COLOR_NAMES[obj.color_id] == m.group(2)


def _check_type(m, scene, cfg):
    color_id = COLOR_NAMES.index(m.group(1))
    obj = next(o for o in scene.objects if o.color_id == color_id)
    return TYPE_NAMES[obj.type_id] == m.group(2)


def _check_side(m, scene, cfg):
    obj = _by_type(scene, m.group(1))
    cx = (obj.cell[0] + 0.5) / cfg.grid[0]
    return ("left" if cx < 0.5 else "right") == m.group(2)


def _check_present(m, scene, cfg):
    color_id = COLOR_NAMES.index(m.group(1))
    type_id = TYPE_NAMES.index(m.group(2))
    return any(o.color_id == color_id and o.type_id == type_id for o in scene.objects)


def _check_absent(m, scene, cfg):
    return not _check_present(m, scene, cfg)


def _check_left_of(m, scene, cfg):
    left_obj = _by_type(scene, m.group(1))
    target = _by_type(scene, m.group(2))
    return left_obj.cell[1] == target.cell[1] and left_obj.cell[0] < target.cell[0]
