"""drill: closed-loop proof-of-vulnerability generation for C/C++ memory bugs.

The package wires four sequential phases around a target program: analyze the
reported vulnerability, build coverage- and sanitizer-instrumented binaries,
iteratively explore input space toward the crash backtrace, and trigger plus
validate the crash against the ground-truth specification.
"""

__version__ = "0.1.0"
