# -*- coding: utf-8 -*-

# Copyright 2026 The fedauth-sim Authors
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this software except in compliance with the License.
# You may obtain a copy of the License at
#
#     https://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

VERSION = (0, 1, 'dev0')
__version__ = ".".join(str(v) for v in VERSION)

NAME = "fedauth-sim"
DESCRIPTION = ("Protocol engine and simulated network for device-centric, privacy-preserving "
               "federated authentication")
HOMEPAGE = None  # not published yet
AUTHOR = "The fedauth-sim Authors"
AUTHOR_EMAIL = None
LICENSE = "Apache License 2.0"

CLASSIFIERS = [
    'Development Status :: 3 - Alpha',
    'Intended Audience :: Developers',
    'Intended Audience :: Science/Research',
    'License :: OSI Approved :: Apache Software License',
    'Topic :: Security',
    'Topic :: Security :: Cryptography',
    'Topic :: System :: Networking',
    'Programming Language :: Python :: 3',
    'Programming Language :: Python :: 3.9',
]

KEYWORDS = [
    "OpenID-Connect",
    "FIDO",
    "federated-identity",
    "anonymous-credentials",
    "selective-disclosure",
    "behavioral-authentication",
    "account-recovery",
    "protocol-simulation",
]
