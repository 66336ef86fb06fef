"""Few-shot image recognition with semantic prompts.

The heavy lifting happens in the compiled ``_core`` extension; this package
re-exports it and adds a couple of conveniences.
"""

from ._core import (
    Classifier,
    ConfigError,
    ConvergenceError,
    Dataset,
    Encoder,
    EmbeddingTable,
    EvalConfig,
    EvalReport,
    InputError,
    IoError,
    Mechanism,
    ModelConfig,
    NumericError,
    ParseError,
    Pooling,
    Projector,
    PromptConfig,
    PromptModule,
    SempromptError,
    ShapeError,
    Split,
    StateError,
    SyntheticConfig,
    TrainingError,
    aligned_embeddings,
    classify_cosine,
    encode,
    encode_with_prompt,
    evaluate,
    generate_dataset,
    gradient_check,
    load_checkpoint,
    load_dataset,
    load_embeddings,
    meta_loss,
    run_cli,
    save_dataset,
)

__version__ = "0.1.0"


def cli(*args: str) -> str:
    """Run a ``semprompt`` subcommand in-process and return its stdout.

    Raises ``RuntimeError`` carrying stderr when the command fails.
    """
    code, out, err = run_cli([str(a) for a in args])
    if code != 0:
        raise RuntimeError(f"semprompt {args[0] if args else ''} exited with {code}: {err.strip()}")
    return out
