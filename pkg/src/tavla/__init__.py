"""tavla: text-aware visuomotor policies on a tiny numpy autodiff core."""

__version__ = "0.1.0"
