import click

from app.api import (
    api_synth,
    api_pretrain,
    api_finetune,
    api_generate,
    api_evaluate,
)

router = [
    api_synth.command,
    api_pretrain.command,
    api_finetune.subtype_command,
    api_finetune.survival_command,
    api_generate.command,
    api_evaluate.command,
]


def include_router(group: click.Group) -> click.Group:
    for command in router:
        group.add_command(command)
    return group
