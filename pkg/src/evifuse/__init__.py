"""Evidence-fused LSTM load forecasting.

``evidence`` holds the belief-function algebra, ``forecast`` a numpy LSTM,
``dataset`` ingestion and sample building, ``fusion`` the event scoring and
decision pipeline, and ``cli`` the command-line front end.
"""

__version__ = "0.1.0"
