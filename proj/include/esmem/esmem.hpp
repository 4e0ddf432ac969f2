#pragma once
// Umbrella header for the full pipeline: segmentation, layered memory,
// coarse-to-fine retrieval, and evaluation.

#include "esmem/config.hpp"
#include "esmem/dialogue.hpp"
#include "esmem/errors.hpp"
#include "esmem/evaluation.hpp"
#include "esmem/http_provider.hpp"
#include "esmem/logging.hpp"
#include "esmem/memory.hpp"
#include "esmem/mock_provider.hpp"
#include "esmem/prompts.hpp"
#include "esmem/provider.hpp"
#include "esmem/retrieval.hpp"
#include "esmem/segmentation.hpp"
