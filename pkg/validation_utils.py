#!/usr/bin/env python3
"""
Validation Utilities for the EmambaIR toolkit
Provides the shared error type, shape/value guards and file-error translation
used by every pipeline stage (tensor engine, event pipeline, network, harness)
"""

import logging
import os
from datetime import datetime
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Union

import numpy as np

logger = logging.getLogger(__name__)


class ValidationError(Exception):
    """Enhanced validation error with error codes, severity, and actionable messages"""

    # Error severity levels
    CRITICAL = "CRITICAL"  # Run cannot continue
    ERROR = "ERROR"        # Operation failed, caller may recover
    WARNING = "WARNING"    # Issue detected but run can continue

    # Error categories
    SHAPE_ERROR = "SHAPE_ERROR"
    NUMERIC_ERROR = "NUMERIC_ERROR"
    FILE_ERROR = "FILE_ERROR"
    CONFIG_ERROR = "CONFIG_ERROR"
    DATA_ERROR = "DATA_ERROR"
    DEPENDENCY_ERROR = "DEPENDENCY_ERROR"

    def __init__(self, message: str, error_code: str = None, severity: str = ERROR,
                 category: str = None, suggestions: List[str] = None, step: str = None):
        super().__init__(message)
        self.error_code = error_code or "VALIDATION_ERROR"
        self.severity = severity
        self.category = category or "UNKNOWN"
        self.suggestions = suggestions or []
        self.step = step
        self.timestamp = datetime.now()

    def __str__(self):
        return f"[{self.severity}] {self.args[0]}"

    def get_formatted_error(self) -> str:
        """Get formatted error message for user display"""
        lines = [
            f"🚨 {self.severity}: {self.args[0]}",
            f"📍 Error Code: {self.error_code}",
            f"📂 Category: {self.category}"
        ]

        if self.step:
            lines.append(f"🔧 Step: {self.step}")

        if self.suggestions:
            lines.append("💡 Suggestions:")
            for suggestion in self.suggestions:
                lines.append(f"   • {suggestion}")

        return "\n".join(lines)


class ShapeValidator:
    """
    Shape and value guards shared by the numeric modules

    Every check raises ValidationError with a stable error code so tests and
    the CLI can tell failure modes apart.
    """

    @classmethod
    def check_same_shape(cls, a: Sequence[int], b: Sequence[int], operation: str,
                         step: str = None) -> None:
        if tuple(a) != tuple(b):
            raise ValidationError(
                f"Shape mismatch in {operation}: {tuple(a)} vs {tuple(b)}",
                error_code="SHAPE_MISMATCH",
                category=ValidationError.SHAPE_ERROR,
                suggestions=["Check that both operands come from the same resolution and channel count"],
                step=step
            )

    @classmethod
    def check_ndim(cls, shape: Sequence[int], allowed: Iterable[int], operation: str,
                   step: str = None) -> None:
        allowed = tuple(allowed)
        if len(shape) not in allowed:
            raise ValidationError(
                f"{operation} expects rank {allowed}, got shape {tuple(shape)}",
                error_code="SHAPE_MISMATCH",
                category=ValidationError.SHAPE_ERROR,
                step=step
            )

    @classmethod
    def check_finite(cls, values: np.ndarray, operation: str, step: str = None) -> None:
        if not np.all(np.isfinite(values)):
            raise ValidationError(
                f"Non-finite values produced by {operation}",
                error_code="NON_FINITE_VALUE",
                severity=ValidationError.CRITICAL,
                category=ValidationError.NUMERIC_ERROR,
                suggestions=[
                    "Lower the learning rate",
                    "Check inputs for NaN/Inf before the forward pass"
                ],
                step=step
            )

    @classmethod
    def check_positive_int(cls, value: int, name: str, error_code: str,
                           step: str = None) -> None:
        if int(value) != value or value <= 0:
            raise ValidationError(
                f"{name} must be a positive integer, got {value}",
                error_code=error_code,
                category=ValidationError.CONFIG_ERROR,
                step=step
            )


class FileValidator:
    """
    File validation utilities
    Validates tensor, event, checkpoint and config files before they are parsed
    """

    SUPPORTED_EXTENSIONS = {
        "tensor": {".etsr"},
        "events": {".csv"},
        "checkpoint": {".ckpt"},
        "config": {".yaml", ".yml"},
    }
    MAX_FILE_SIZE_MB = 512

    @classmethod
    def validate_input_file(cls, file_path: Union[str, Path], kind: Optional[str] = None) -> Path:
        """
        Input file validation

        Args:
            file_path: Path to input file
            kind: One of SUPPORTED_EXTENSIONS keys, or None to skip the extension check

        Returns:
            Validated Path object

        Raises:
            ValidationError: If validation fails with actionable message
        """
        file_path = Path(file_path)

        if not file_path.exists():
            raise ValidationError(
                f"Input file not found: {file_path}",
                error_code="FILE_NOT_FOUND",
                category=ValidationError.FILE_ERROR,
                suggestions=["Check the file path and ensure the file exists"]
            )

        if kind is not None and file_path.suffix.lower() not in cls.SUPPORTED_EXTENSIONS[kind]:
            raise ValidationError(
                f"Unsupported {kind} file format: {file_path.suffix}",
                error_code="UNSUPPORTED_FORMAT",
                category=ValidationError.FILE_ERROR,
                suggestions=[f"Supported formats: {', '.join(sorted(cls.SUPPORTED_EXTENSIONS[kind]))}"]
            )

        file_size_mb = file_path.stat().st_size / (1024 * 1024)
        if file_size_mb > cls.MAX_FILE_SIZE_MB:
            logger.warning(
                f"⚠️  Large file detected: {file_size_mb:.1f}MB (recommended max: {cls.MAX_FILE_SIZE_MB}MB)"
            )

        if not os.access(file_path, os.R_OK):
            raise ValidationError(
                f"Cannot read file: {file_path}",
                error_code="FILE_NOT_READABLE",
                category=ValidationError.FILE_ERROR,
                suggestions=["Check file permissions"]
            )

        return file_path


class ErrorHandler:
    """
    Translate low-level I/O failures into actionable messages
    """

    @classmethod
    def handle_file_error(cls, error: Exception, file_path: Path, operation: str) -> str:
        """
        Generate actionable error message for file operations

        Args:
            error: The original exception
            file_path: Path that caused the error
            operation: Description of operation (e.g., "reading tensor", "saving checkpoint")

        Returns:
            Formatted error message with suggestions
        """
        error_type = type(error).__name__

        if isinstance(error, FileNotFoundError):
            return (
                f"File not found during {operation}: {file_path}\n"
                f"Suggestions:\n"
                f"- Check if the file path is correct\n"
                f"- Run the 'simulate' mode first if this is a generated dataset file"
            )

        elif isinstance(error, PermissionError):
            return (
                f"Permission denied during {operation}: {file_path}\n"
                f"Suggestions:\n"
                f"- Check if you have read/write permissions\n"
                f"- Choose a different --out directory"
            )

        elif isinstance(error, (EOFError, ValueError)):
            return (
                f"Truncated or corrupt file during {operation}: {file_path}\n"
                f"Error details: {error}\n"
                f"Suggestions:\n"
                f"- Regenerate the file; partial writes leave truncated payloads"
            )

        else:
            return (
                f"Unexpected error during {operation}: {file_path}\n"
                f"Error type: {error_type}\n"
                f"Error details: {str(error)}\n"
                f"Suggestions:\n"
                f"- Ensure sufficient disk space\n"
                f"- Try with a different file to isolate the issue"
            )


def handle_validation_error(e: ValidationError, logger=None) -> None:
    """
    Standard error handler for ValidationError exceptions

    Args:
        e: ValidationError exception
        logger: Optional logger for additional error logging
    """
    if logger:
        logger.error("💥 Validation Error:")
    print(e.get_formatted_error())
