"""Run report rendering with Jinja2."""

from pathlib import Path
from typing import Any, Optional

from jinja2 import (
    Environment,
    FileSystemLoader,
    StrictUndefined,
    TemplateNotFound,
    TemplateSyntaxError,
)
from jinja2.environment import Template
from rich.tree import Tree

from wassprox.utils.io import atomic_write_text, format_number
from wassprox.utils.validators import ValidationError


def _number(value: Any) -> str:
    """Short display form for report tables."""
    if isinstance(value, float):
        return f"{value:.6g}"
    return format_number(value)


class ReportEngine:
    """Jinja2 engine for the markdown run reports."""

    def __init__(self, template_dir: Optional[str] = None) -> None:
        """Initialize the report engine.

        Args:
            template_dir: Directory holding the report templates. Defaults to
                the templates packaged with wassprox.
        """
        if template_dir:
            self.template_dir = Path(template_dir)
        else:
            self.template_dir = Path(__file__).parent / "templates"

        self.env = Environment(
            loader=FileSystemLoader(str(self.template_dir)),
            autoescape=False,
            trim_blocks=True,
            lstrip_blocks=True,
            undefined=StrictUndefined,
            keep_trailing_newline=True,
        )
        self.env.filters["num"] = _number

    def get_template(self, template_path: str) -> Template:
        """Get a template by path.

        Raises:
            ValidationError: If the template is missing or does not parse.
        """
        try:
            return self.env.get_template(template_path)
        except TemplateNotFound as e:
            raise ValidationError(f"Report template not found: {template_path}") from e
        except TemplateSyntaxError as e:
            raise ValidationError(
                f"Syntax error in template {template_path} at line {e.lineno}: {e.message}"
            ) from e

    def render_template(self, template_path: str, context: dict[str, Any]) -> str:
        return self.get_template(template_path).render(**context)

    def render_file(self, template_path: str, context: dict[str, Any], output_path: Path) -> Path:
        """Render a template and write it atomically."""
        return atomic_write_text(output_path, self.render_template(template_path, context))

    def artifact_tree(self, run_dir: Path, artifacts: list[str]) -> Tree:
        """Rich tree of a run directory's artifacts."""
        tree = Tree(f"[bold]{run_dir.name}[/]", guide_style="bold.cyan")
        for name in sorted(artifacts):
            style = "green" if (run_dir / name).exists() else "red"
            tree.add(f"[{style}]{name}[/]")
        return tree
