"""Live model backends: CLIP embeddings and diffusion cross-attention.

Everything here imports its heavy dependency lazily and converts any
failure (missing package, missing weights, no network) into a
ProviderError, so the rest of the package stays importable and testable
offline. Model weights are cached under the directory named by the
PRIMDRAW_CACHE environment variable when set.
"""

from __future__ import annotations

import os

import numpy as np
import torch

from .errors import ProviderError
from .scoring import Embedding

# OpenAI CLIP preprocessing constants.
_CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
_CLIP_STD = (0.26862954, 0.26130258, 0.27577711)


def cache_dir() -> str | None:
    return os.environ.get("PRIMDRAW_CACHE") or None


class TransformersClipBackend:
    """CLIP text/image encoders with gradient flow back to raster pixels."""

    def __init__(self, model_name: str = "openai/clip-vit-base-patch32",
                 device: str = "cpu"):
        try:
            from transformers import CLIPModel, CLIPTokenizer
        except ImportError as exc:
            raise ProviderError(
                "live embedding backend needs the 'transformers' package"
            ) from exc
        try:
            self._model = CLIPModel.from_pretrained(model_name, cache_dir=cache_dir())
            self._tokenizer = CLIPTokenizer.from_pretrained(
                model_name, cache_dir=cache_dir())
        except Exception as exc:
            raise ProviderError(f"cannot load CLIP model {model_name!r}: {exc}") from exc
        self._model.eval().to(device)
        for p in self._model.parameters():
            p.requires_grad_(False)
        self._device = device
        self._size = self._model.config.vision_config.image_size
        self.identifier = f"clip:{model_name}"

    def encode_text(self, text: str) -> Embedding:
        tokens = self._tokenizer([text], padding=True, return_tensors="pt")
        tokens = {k: v.to(self._device) for k, v in tokens.items()}
        with torch.no_grad():
            feats = self._model.get_text_features(**tokens)
        return Embedding(feats[0].detach().to(torch.float64).cpu())

    def encode_image(self, images: torch.Tensor) -> torch.Tensor:
        if images.ndim == 3:
            images = images[None]
        x = images.permute(0, 3, 1, 2).to(torch.float32).to(self._device)
        if x.shape[-2:] != (self._size, self._size):
            x = torch.nn.functional.interpolate(
                x, size=(self._size, self._size), mode="bicubic",
                align_corners=False)
        mean = torch.tensor(_CLIP_MEAN, device=self._device).view(1, 3, 1, 1)
        std = torch.tensor(_CLIP_STD, device=self._device).view(1, 3, 1, 1)
        feats = self._model.get_image_features(pixel_values=(x - mean) / std)
        return feats.to(torch.float64).cpu()


class DiffusionAttentionProvider:
    """Cross-attention maps for the focus token from a latent diffusion model.

    Hooks every cross-attention processor in the denoising UNet, records
    the attention paid to the focus token's text positions at each step
    (both down/up sample blocks at their native resolutions), and returns
    those raw maps together with the generated image.
    """

    def __init__(self, model_name: str = "runwayml/stable-diffusion-v1-5",
                 device: str | None = None, num_inference_steps: int = 30,
                 guidance_scale: float = 7.5):
        self.model_name = model_name
        self.device = device or ("cuda" if torch.cuda.is_available() else "cpu")
        self.num_inference_steps = num_inference_steps
        self.guidance_scale = guidance_scale
        self.identifier = f"attention:diffusion:{model_name}"
        self._pipe = None

    def _load(self):
        if self._pipe is not None:
            return self._pipe
        try:
            from diffusers import StableDiffusionPipeline
        except ImportError as exc:
            raise ProviderError(
                "live attention needs the 'diffusers' package "
                "(pip install primdraw[live])"
            ) from exc
        try:
            dtype = torch.float16 if self.device == "cuda" else torch.float32
            self._pipe = StableDiffusionPipeline.from_pretrained(
                self.model_name, torch_dtype=dtype, cache_dir=cache_dir(),
                safety_checker=None, requires_safety_checker=False,
            ).to(self.device)
        except Exception as exc:
            raise ProviderError(
                f"cannot load diffusion model {self.model_name!r}: {exc}"
            ) from exc
        return self._pipe

    def _token_positions(self, pipe, prompt: str, focus_token: str) -> list[int]:
        ids = pipe.tokenizer(prompt).input_ids
        focus_ids = pipe.tokenizer(focus_token, add_special_tokens=False).input_ids
        for start in range(len(ids) - len(focus_ids) + 1):
            if ids[start:start + len(focus_ids)] == focus_ids:
                return list(range(start, start + len(focus_ids)))
        raise ProviderError(
            f"focus token {focus_token!r} not found in the tokenized prompt"
        )

    def fetch(self, prompt: str, focus_token: str, seed: int
              ) -> tuple[list[np.ndarray], np.ndarray | None]:
        pipe = self._load()
        positions = self._token_positions(pipe, prompt, focus_token)
        recorded: list[np.ndarray] = []

        try:
            from diffusers.models.attention_processor import Attention, AttnProcessor
        except Exception as exc:
            raise ProviderError(f"unsupported diffusers version: {exc}") from exc

        class RecordingProcessor(AttnProcessor):
            def __call__(self, attn: Attention, hidden_states, encoder_hidden_states=None,
                         attention_mask=None, **kwargs):
                is_cross = encoder_hidden_states is not None
                if is_cross:
                    query = attn.head_to_batch_dim(attn.to_q(hidden_states))
                    key = attn.head_to_batch_dim(attn.to_k(encoder_hidden_states))
                    probs = attn.get_attention_scores(query, key, attention_mask)
                    # keep only the conditional half when the batch was
                    # doubled for classifier-free guidance
                    if probs.shape[0] > attn.heads:
                        probs = probs[probs.shape[0] // 2:]
                    focus = probs[:, :, positions].mean(dim=(0, 2))
                    side = int(round(float(focus.shape[0]) ** 0.5))
                    if side * side == focus.shape[0]:
                        recorded.append(
                            focus.reshape(side, side).to(torch.float32).cpu().numpy()
                        )
                return super().__call__(attn, hidden_states, encoder_hidden_states,
                                        attention_mask, **kwargs)

        original = pipe.unet.attn_processors
        try:
            pipe.unet.set_attn_processor(RecordingProcessor())
            generator = torch.Generator(self.device).manual_seed(seed)
            result = pipe(prompt, num_inference_steps=self.num_inference_steps,
                          guidance_scale=self.guidance_scale, generator=generator)
        except ProviderError:
            raise
        except Exception as exc:
            raise ProviderError(f"diffusion sampling failed: {exc}") from exc
        finally:
            try:
                pipe.unet.set_attn_processor(original)
            except Exception:
                pass

        if not recorded:
            raise ProviderError("no cross-attention maps were recorded")
        image = np.asarray(result.images[0], dtype=np.float64) / 255.0
        return recorded, image
