"""Federated shared/group prompt tuning over a frozen transformer encoder."""
