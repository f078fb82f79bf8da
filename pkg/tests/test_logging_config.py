"""Tests for the logging_config module."""

import io
import logging

from rich.console import Console
from rich.logging import RichHandler

from wassprox.logging_config import LOGGER_NAME, configure_logging


class TestConfigureLogging:
    """Tests for configure_logging function."""

    def test_single_handler(self):
        """Test that repeated setup keeps one RichHandler."""
        configure_logging()
        logger = configure_logging(verbose=True)
        handlers = [h for h in logger.handlers if isinstance(h, RichHandler)]
        assert len(handlers) == 1
        assert logger.name == LOGGER_NAME
        assert logger.propagate is False

    def test_levels(self):
        """Test INFO by default and DEBUG when verbose."""
        assert configure_logging().level == logging.INFO
        assert configure_logging(verbose=True).level == logging.DEBUG

    def test_module_loggers_reach_console(self):
        """Test that package module loggers write through the handler."""
        buffer = io.StringIO()
        configure_logging(console=Console(file=buffer, width=120))
        logging.getLogger("wassprox.scenario").info("Built table")
        assert "Built table" in buffer.getvalue()
