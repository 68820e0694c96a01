# scenecompress: radiance-field scene compression by magnitude pruning
