# Storage utilities

