#pragma once

#include "novelgs/autograd.hpp"
#include "novelgs/checkpoint.hpp"
#include "novelgs/data.hpp"
#include "novelgs/denoiser.hpp"
#include "novelgs/diffusion.hpp"
#include "novelgs/gaussians.hpp"
#include "novelgs/geometry.hpp"
#include "novelgs/image.hpp"
#include "novelgs/metrics.hpp"
#include "novelgs/nn.hpp"
#include "novelgs/renderer.hpp"
#include "novelgs/tokenizer.hpp"
#include "novelgs/training.hpp"
