"""On-disk stores."""
