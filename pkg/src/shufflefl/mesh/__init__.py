"""Networked runtime: framing, transports, session config and node roles."""
