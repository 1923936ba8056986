"""Deferred diffusion for synthetic head avatars."""
