# Worker module

