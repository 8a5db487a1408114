"""vulnproof: grey-box validation of reported web-application vulnerabilities.

Given a report (CWE class, code location, attack type) and a sandboxed
deployment of the target, the engine plans, inspects source, executes
candidate exploits and checks an attack-type oracle, producing a
reproducible proof-of-concept on success.
"""

__version__ = "0.1.0"
