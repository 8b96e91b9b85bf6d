# API routes

