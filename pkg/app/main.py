import logging
import logging.config

import click

from app.api.api_router import include_router
from app.core.config import settings
from app.helpers.exception_handler import CustomException, cli_exception_handler

logging.config.fileConfig(settings.LOGGING_CONFIG_FILE, disable_existing_loggers=False)


class MorpheusGroup(click.Group):
    """Maps CustomException to its exit code (2 config, 3 data validation, 4 numeric)."""

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except CustomException as exc:
            ctx.exit(cli_exception_handler(exc))


def get_application() -> click.Group:
    application = MorpheusGroup(
        name="morpheus",
        help=f"""
        {settings.PROJECT_NAME}: masked multimodal pre-training on histopathology and omics.

        synth-data, pretrain, finetune-subtype, finetune-survival, generate, evaluate
        """,
    )
    return include_router(application)


app = get_application()
if __name__ == "__main__":
    app()
