"""
Error types surfaced by the command line.

Each error carries the process exit code it maps to, the way an HTTP error
carries its status code: 1 for runtime failures, 2 for bad inputs.
"""


class PromptSegError(Exception):
    exit_code = 1

    def __init__(self, detail: str):
        super().__init__(detail)
        self.detail = detail


class InputValidationError(PromptSegError, ValueError):
    exit_code = 2


class ManifestParseError(InputValidationError):
    def __init__(self, line_number: int, reason: str):
        super().__init__(f"Manifest line {line_number}: {reason}")
        self.line_number = line_number


class TrainingDivergedError(PromptSegError):
    def __init__(self, step: int, batch_ids: list[str], dump_path: str | None = None):
        where = f" (batch dumped to {dump_path})" if dump_path else ""
        super().__init__(
            f"Non-finite loss at step {step} on batch {', '.join(batch_ids)}{where}"
        )
        self.step = step
        self.batch_ids = batch_ids
        self.dump_path = dump_path
