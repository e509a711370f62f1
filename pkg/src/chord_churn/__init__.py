"""Chord under churn: steady-state theory and a discrete-event simulator."""
