# Prompt-based visual alignment for zero-shot policy transfer
