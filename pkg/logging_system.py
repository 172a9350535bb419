#!/usr/bin/env python3
"""
Structured logging system for the RHRSegNet pipeline
Provides JSON logs with run context and performance timing
"""

import logging
import json
import os
import sys
import time
from datetime import datetime
from typing import Dict, Any, Optional
from functools import wraps
import traceback
from contextlib import contextmanager


class StructuredFormatter(logging.Formatter):
    """Render each record as a single JSON object"""

    EXTRA_FIELDS = ('run_id', 'event', 'duration_ms', 'metrics', 'error_context', 'details')

    def format(self, record):
        log_entry = {
            'timestamp': datetime.utcnow().isoformat(),
            'level': record.levelname,
            'component': record.name,
            'message': record.getMessage(),
        }

        for field in self.EXTRA_FIELDS:
            if hasattr(record, field):
                log_entry[field] = getattr(record, field)

        return json.dumps(log_entry, default=str)


class SegLogger:
    """Centralized logging for training, evaluation and the command line"""

    def __init__(self, log_level: Optional[str] = None):
        self.setup_logger(log_level or os.getenv('RHRSEG_LOG_LEVEL', 'INFO'))
        self.run_contexts: Dict[str, Dict] = {}

    def setup_logger(self, log_level: str):
        """Configure structured logging with proper formatting"""
        self.logger = logging.getLogger('rhrseg')
        self.logger.setLevel(getattr(logging, log_level.upper(), logging.INFO))
        self.logger.propagate = False

        # Handlers survive module reloads; only attach once
        if self.logger.handlers:
            return

        console_handler = logging.StreamHandler(sys.stderr)
        console_handler.setFormatter(StructuredFormatter())
        self.logger.addHandler(console_handler)

        log_file = os.getenv('RHRSEG_LOG_FILE')
        if log_file:
            file_handler = logging.FileHandler(log_file)
            file_handler.setFormatter(StructuredFormatter())
            self.logger.addHandler(file_handler)

        error_file = os.getenv('RHRSEG_ERROR_LOG_FILE')
        if error_file:
            error_handler = logging.FileHandler(error_file)
            error_handler.setLevel(logging.ERROR)
            error_handler.setFormatter(StructuredFormatter())
            self.logger.addHandler(error_handler)

    def set_run_context(self, run_id: str, context: Dict[str, Any]):
        """Store context information for a run"""
        self.run_contexts[run_id] = {
            **context,
            'created_at': datetime.utcnow().isoformat()
        }

    def get_run_context(self, run_id: str) -> Dict[str, Any]:
        """Retrieve context information for a run"""
        return self.run_contexts.get(run_id, {})

    def log_run_event(self, run_id: Optional[str], event: str, details: Dict[str, Any] = None):
        """Log run-level events with context"""
        self.logger.info(
            f"Run event: {event}",
            extra={
                'run_id': run_id,
                'event': event,
                'details': {**self.get_run_context(run_id or ''), **(details or {})}
            }
        )

    def log_error(self, run_id: Optional[str], error: Exception, context: str = ""):
        """Log errors with full context and stack trace"""
        error_context = {
            'error_type': type(error).__name__,
            'error_message': str(error),
            'stack_trace': traceback.format_exc(),
            'context': context,
        }

        self.logger.error(
            f"Error in {context}: {str(error)}",
            extra={
                'run_id': run_id,
                'event': 'error',
                'error_context': error_context
            }
        )


# Global logger instance
seg_logger = SegLogger()


def log_performance(operation_name: str):
    """Decorator to log function performance"""
    def decorator(func):
        @wraps(func)
        def wrapper(*args, **kwargs):
            start_time = time.time()

            try:
                result = func(*args, **kwargs)
                duration = (time.time() - start_time) * 1000

                seg_logger.logger.debug(
                    f"Operation completed: {operation_name}",
                    extra={
                        'event': f'operation_{operation_name}',
                        'duration_ms': duration,
                        'metrics': {'operation': operation_name, 'success': True}
                    }
                )
                return result

            except Exception as e:
                duration = (time.time() - start_time) * 1000
                seg_logger.log_error(None, e, f"Operation: {operation_name}")
                seg_logger.logger.debug(
                    f"Operation failed: {operation_name}",
                    extra={
                        'event': f'operation_{operation_name}_failed',
                        'duration_ms': duration,
                        'metrics': {'operation': operation_name, 'success': False}
                    }
                )
                raise

        return wrapper
    return decorator


@contextmanager
def log_command_context(run_id: Optional[str], command: str):
    """Context manager for logging a command-line invocation"""
    start_time = time.time()

    try:
        seg_logger.log_run_event(run_id, 'command_start', {'command': command})

        yield

        duration = (time.time() - start_time) * 1000
        seg_logger.logger.info(
            f"Command finished: {command}",
            extra={'run_id': run_id, 'event': 'command_end', 'duration_ms': duration}
        )

    except Exception as e:
        duration = (time.time() - start_time) * 1000
        seg_logger.log_error(run_id, e, f"command: {command}")
        seg_logger.logger.info(
            f"Command aborted: {command}",
            extra={'run_id': run_id, 'event': 'command_failed', 'duration_ms': duration}
        )
        raise


def log_startup(command: str):
    """Log command-line startup information"""
    seg_logger.logger.info(
        "RHRSegNet starting up",
        extra={'event': 'startup', 'details': {'command': command}}
    )


def log_shutdown(exit_code: int):
    """Log command-line shutdown information"""
    seg_logger.logger.info(
        "RHRSegNet shutting down",
        extra={'event': 'shutdown', 'details': {'exit_code': exit_code}}
    )


# Convenience functions for common logging patterns
def log_train_step(run_id: Optional[str], record: Dict[str, Any]):
    """Log one optimisation step"""
    seg_logger.logger.debug(
        f"Step {record.get('iteration')}",
        extra={'run_id': run_id, 'event': 'train_step', 'metrics': record}
    )


def log_eval_result(run_id: Optional[str], iteration: int, miou: float, pixel_accuracy: float):
    """Log an evaluation pass"""
    seg_logger.logger.info(
        f"Evaluation at iteration {iteration}: mIoU={miou:.4f}",
        extra={
            'run_id': run_id,
            'event': 'evaluation',
            'metrics': {'iteration': iteration, 'miou': miou, 'pixel_accuracy': pixel_accuracy}
        }
    )


def log_checkpoint_saved(run_id: Optional[str], path: str, iteration: int):
    """Log checkpoint emission"""
    seg_logger.log_run_event(run_id, 'checkpoint_saved', {'path': path, 'iteration': iteration})


def log_dataset_indexed(root: str, layout: str, split: str, count: int, orphans: int):
    """Log dataset indexing results"""
    seg_logger.logger.info(
        f"Indexed {count} samples from {root} ({layout}/{split})",
        extra={
            'event': 'dataset_indexed',
            'details': {'root': root, 'layout': layout, 'split': split,
                        'count': count, 'orphans': orphans}
        }
    )


__all__ = [
    'seg_logger',
    'log_performance',
    'log_command_context',
    'log_startup',
    'log_shutdown',
    'log_train_step',
    'log_eval_result',
    'log_checkpoint_saved',
    'log_dataset_indexed',
]
