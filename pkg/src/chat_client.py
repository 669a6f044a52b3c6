"""
chat_client.py - Remote chat-completions backend with retry and concurrency cap.

Handles:
- Building chat-completions requests (frames as image_url parts, context as text)
- Embedding requests (token-level or pooled replies)
- Fixed-backoff retry for timeouts, connection errors, 429 and 5xx
- Per-backend concurrent request cap and optional minimum request interval
"""

import base64
import logging
import mimetypes
import threading
import time
from pathlib import Path
from typing import Any, Optional

import numpy as np
import requests

from .backend import BackendTimeout, BackendUnavailable, ModelBackend, ModelRequest
from .config import BackendConfig, EmbedderConfig, get_api_key, mask_secret
from .prompts import PromptBundle
from .retrieval import EmptyText, TokenEmbeddingMatrix, as_token_matrix, hashing_embedder

logger = logging.getLogger(__name__)

RETRYABLE_STATUS = (429, 500, 502, 503, 504)


def frame_content_part(ref: str) -> dict[str, Any]:
    """
    Turn a frame reference into an image_url content part.

    URLs and data URIs pass through; existing local files are inlined as base64.
    Any other reference is treated as an opaque URL.
    """
    if ref.startswith(("http://", "https://", "data:")):
        return {"type": "image_url", "image_url": {"url": ref}}

    path = Path(ref)
    if path.is_file():
        mime = mimetypes.guess_type(path.name)[0] or "image/jpeg"
        b64 = base64.b64encode(path.read_bytes()).decode("ascii")
        return {"type": "image_url", "image_url": {"url": f"data:{mime};base64,{b64}"}}

    return {"type": "image_url", "image_url": {"url": ref}}


def build_messages(request: ModelRequest) -> list[dict[str, Any]]:
    """Single user message: frame parts first, then the prompt text."""
    if not request.frame_refs:
        return [{"role": "user", "content": request.prompt}]
    content = [frame_content_part(ref) for ref in request.frame_refs]
    content.append({"type": "text", "text": request.prompt})
    return [{"role": "user", "content": content}]


def extract_reply_text(payload: dict[str, Any]) -> str:
    """
    Pull the single-choice reply text from a chat-completions response.

    Raises:
        BackendUnavailable: If the response has no usable choice
    """
    try:
        content = payload["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError) as e:
        raise BackendUnavailable(f"Malformed chat completion response: {e}") from e

    if content is None:
        return ""
    if isinstance(content, list):
        return "".join(part.get("text", "") for part in content if isinstance(part, dict))
    return str(content)


def extract_embedding(payload: dict[str, Any]) -> TokenEmbeddingMatrix:
    """
    Read an embeddings response; pooled vectors become a 1 x d matrix.

    Raises:
        BackendUnavailable: If the response has no embedding
    """
    try:
        values = payload["data"][0]["embedding"]
    except (KeyError, IndexError, TypeError) as e:
        raise BackendUnavailable(f"Malformed embedding response: {e}") from e

    array = np.asarray(values, dtype=np.float64)
    if array.ndim == 1:
        array = array.reshape(1, -1)
    try:
        return as_token_matrix(array)
    except ValueError as e:
        raise BackendUnavailable(f"Invalid embedding in response: {e}") from e


class RemoteBackend(ModelBackend):
    """
    Chat-completions backend over HTTP.

    Features:
    - Stateless requests: every call carries its full context
    - At most `retries` retries with fixed backoff (Retry-After honoured)
    - Thread-safe concurrent request cap shared by all sessions using the backend
    """

    def __init__(
        self,
        config: BackendConfig,
        embedder: Optional[EmbedderConfig] = None,
        bundle: Optional[PromptBundle] = None,
        session: Optional[requests.Session] = None,
    ):
        super().__init__(bundle)
        self.config = config
        self.embedder = embedder or EmbedderConfig()

        self._base_url = config.base_url.rstrip("/")
        self._timeout = config.timeout_sec
        self._max_retries = config.retries
        self._backoff_sec = config.backoff_sec
        self._api_key = get_api_key(config)

        # Concurrency and pacing
        self._slots = threading.BoundedSemaphore(config.max_concurrency)
        self._pace_lock = threading.Lock()
        self._last_request_time: float = 0
        self._min_interval_ms = config.min_interval_ms

        self._session = session or self._create_session()

        if self._api_key:
            logger.info(
                f"Remote backend {config.model} at {self._base_url} "
                f"(key from ${config.api_key_env}: {mask_secret(self._api_key)})"
            )
        else:
            logger.warning(f"No API key in ${config.api_key_env}; sending unauthenticated requests")

    def _create_session(self) -> requests.Session:
        """Create a requests session with proxy configuration."""
        session = requests.Session()

        if self.config.proxy:
            session.proxies = {
                "http": self.config.proxy,
                "https": self.config.proxy,
            }
            logger.info(f"Using proxy: {self.config.proxy}")

        return session

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self._api_key:
            headers["Authorization"] = f"Bearer {self._api_key}"
        return headers

    def _wait_for_interval(self) -> None:
        """Enforce the minimum interval between request starts."""
        if self._min_interval_ms <= 0:
            return
        with self._pace_lock:
            elapsed_ms = (time.time() - self._last_request_time) * 1000
            if elapsed_ms < self._min_interval_ms:
                sleep_ms = self._min_interval_ms - elapsed_ms
                logger.debug(f"Pacing: sleeping {sleep_ms:.0f}ms")
                time.sleep(sleep_ms / 1000)
            self._last_request_time = time.time()

    def _calculate_backoff(self, response: Optional[requests.Response] = None) -> float:
        """Fixed backoff, unless the server sends Retry-After."""
        if response is not None:
            retry_after = response.headers.get("Retry-After")
            if retry_after:
                try:
                    return float(retry_after)
                except ValueError:
                    pass
        return self._backoff_sec

    def _post(self, endpoint: str, body: dict[str, Any]) -> dict[str, Any]:
        """
        POST a JSON body and return the parsed JSON reply.

        Raises:
            BackendTimeout: If every attempt timed out
            BackendUnavailable: For connection failures, non-retryable statuses
                or exhausted retries
        """
        url = f"{self._base_url}{endpoint}"
        attempt = 0

        while True:
            self._wait_for_interval()

            try:
                logger.debug(f"Request: POST {endpoint} (attempt {attempt + 1})")
                with self._slots:
                    response = self._session.post(
                        url,
                        headers=self._headers(),
                        json=body,
                        timeout=self._timeout,
                    )

                if response.status_code == 200:
                    try:
                        return response.json()
                    except ValueError as e:
                        raise BackendUnavailable(f"Invalid JSON from {endpoint}: {e}") from e

                if response.status_code in RETRYABLE_STATUS and attempt < self._max_retries:
                    backoff = self._calculate_backoff(response)
                    logger.warning(
                        f"Request failed with {response.status_code}, retrying in {backoff:.1f}s "
                        f"(attempt {attempt + 1}/{self._max_retries})"
                    )
                    time.sleep(backoff)
                    attempt += 1
                    continue

                raise BackendUnavailable(
                    f"Backend request failed: {response.status_code} - {response.text[:200]}"
                )

            except requests.exceptions.Timeout:
                if attempt < self._max_retries:
                    backoff = self._calculate_backoff()
                    logger.warning(
                        f"Request timeout, retrying in {backoff:.1f}s "
                        f"(attempt {attempt + 1}/{self._max_retries})"
                    )
                    time.sleep(backoff)
                    attempt += 1
                    continue
                raise BackendTimeout(f"Request to {endpoint} timed out after {attempt + 1} attempts")

            except requests.exceptions.ConnectionError as e:
                if attempt < self._max_retries:
                    backoff = self._calculate_backoff()
                    logger.warning(
                        f"Connection error, retrying in {backoff:.1f}s "
                        f"(attempt {attempt + 1}/{self._max_retries})"
                    )
                    time.sleep(backoff)
                    attempt += 1
                    continue
                raise BackendUnavailable(f"Connection failed: {e}") from e

            except requests.exceptions.RequestException as e:
                raise BackendUnavailable(f"Request to {endpoint} failed: {e}") from e

    def complete(self, request: ModelRequest) -> str:
        body = {
            "model": self.config.model,
            "messages": build_messages(request),
            "temperature": self.config.temperature,
            "max_tokens": self.config.max_tokens,
        }
        payload = self._post("/chat/completions", body)
        reply = extract_reply_text(payload)
        logger.debug(f"{request.capability} reply: {reply[:80]!r}")
        return reply

    def embed_text(self, text: str) -> TokenEmbeddingMatrix:
        if self.embedder.kind == "hashing":
            return hashing_embedder(text, self.embedder.dim)
        if not text.strip():
            raise EmptyText("Cannot embed empty text")
        payload = self._post("/embeddings", {"model": self.embedder.model, "input": text})
        return extract_embedding(payload)

    def close(self) -> None:
        """Close the session."""
        self._session.close()
