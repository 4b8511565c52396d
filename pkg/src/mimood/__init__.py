"""Out-of-distribution detection by fine-tuning on multiple-input-mixup samples."""

__version__ = "0.1.0"
