"""Private set membership for device identifiers over batched BFV."""
